//! Minimal NIfTI-1 single-file (`.nii`) codec.
//!
//! Only the subset the toolkit needs: `n+1` magic, uncompressed payload,
//! `uint8`/`float32`/`float64` data, up to four dimensions, sform affine.
//! Both byte orders are read; files are always written little-endian with
//! `vox_offset = 352`, `sform_code = 1` and `qform_code = 0`.

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Stored element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    F32,
    F64,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::U8 => DT_UINT8,
            Datatype::F32 => DT_FLOAT32,
            Datatype::F64 => DT_FLOAT64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            DT_UINT8 => Ok(Datatype::U8),
            DT_FLOAT32 => Ok(Datatype::F32),
            DT_FLOAT64 => Ok(Datatype::F64),
            other => Err(Error::Nifti(format!("unsupported datatype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// Geometry and storage description of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    /// One to four extents: x, y, z, volumes.
    pub dims: Vec<usize>,
    /// Millimetres per spatial axis.
    pub voxel_size: [f64; 3],
    pub datatype: Datatype,
    /// Voxel-to-world transform, row-major.
    pub affine: [[f64; 4]; 4],
    /// Free text stored in `descrip` (truncated to 79 bytes).
    pub description: String,
}

impl VolumeHeader {
    /// Header with a diagonal affine built from the voxel size.
    pub fn new(dims: &[usize], voxel_size: [f64; 3], datatype: Datatype) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (i, &v) in voxel_size.iter().enumerate() {
            affine[i][i] = v;
        }
        affine[3][3] = 1.0;
        Self {
            dims: dims.to_vec(),
            voxel_size,
            datatype,
            affine,
            description: String::new(),
        }
    }

    /// The three spatial extents; missing axes count as 1.
    pub fn spatial_dims(&self) -> [usize; 3] {
        let mut d = [1; 3];
        for (slot, &v) in d.iter_mut().zip(&self.dims) {
            *slot = v;
        }
        d
    }

    /// Extent of the fourth axis (1 for 3D volumes).
    pub fn volumes(&self) -> usize {
        self.dims.get(3).copied().unwrap_or(1)
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() > 4 {
            return Err(Error::Nifti(format!("{} dimensions, expected 1 to 4", self.dims.len())));
        }
        if self.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::Nifti(format!("extents {:?} out of range", self.dims)));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Nifti(format!("voxel size {:?} must be positive", self.voxel_size)));
        }
        Ok(())
    }

    /// Copy of this header describing a different array shape and type.
    pub fn reshaped(&self, dims: &[usize], datatype: Datatype) -> Self {
        Self { dims: dims.to_vec(), datatype, ..self.clone() }
    }

    /// Copy with the spatial grid coarsened by an integer factor.
    pub fn downsampled(&self, dims: &[usize], gamma: usize) -> Self {
        let g = gamma as f64;
        let mut h = self.reshaped(dims, self.datatype);
        for v in &mut h.voxel_size {
            *v *= g;
        }
        // Block centres shift by (γ-1)/2 original voxels.
        for row in 0..3 {
            let shift: f64 = (0..3).map(|c| self.affine[row][c] * (g - 1.0) / 2.0).sum();
            for c in 0..3 {
                h.affine[row][c] = self.affine[row][c] * g;
            }
            h.affine[row][3] = self.affine[row][3] + shift;
        }
        h
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.take::<2>(at);
        if self.little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }
    fn f32(&self, at: usize) -> f32 {
        let b = self.take::<4>(at);
        if self.little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }
    fn f64(&self, at: usize) -> f64 {
        let b = self.take::<8>(at);
        if self.little { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
    }
}

/// Decodes a single-file NIfTI-1 image into its header and an x-fastest
/// array of `f64`.
pub fn read_nifti(bytes: &[u8]) -> Result<(VolumeHeader, Vec<f64>)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let little = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => true,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => false,
        other => return Err(Error::Nifti(format!("sizeof_hdr is {other}, expected 348"))),
    };
    let r = Reader { bytes, little };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Nifti("detached header/image pairs are not supported".into())),
        m => return Err(Error::Nifti(format!("bad magic {m:?}"))),
    }

    let ndim = r.i16(40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim}, only 1 to 4 dimensions are supported")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        let d = r.i16(42 + 2 * i);
        if d < 1 {
            return Err(Error::Nifti(format!("dim[{}] = {d}", i + 1)));
        }
        dims.push(d as usize);
    }
    let datatype = Datatype::from_code(r.i16(70))?;
    let mut voxel_size = [1.0; 3];
    for (i, v) in voxel_size.iter_mut().enumerate() {
        let p = f64::from(r.f32(80 + 4 * i)).abs();
        *v = if p > 0.0 { p } else { 1.0 };
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= DATA_OFFSET as f32) {
        return Err(Error::Nifti(format!("vox_offset {vox_offset} is below {DATA_OFFSET}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);

    let sform_code = r.i16(254);
    let mut affine = [[0.0; 4]; 4];
    affine[3][3] = 1.0;
    if sform_code > 0 {
        for (row, base) in [280, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                affine[row][c] = f64::from(r.f32(base + 4 * c));
            }
        }
    } else {
        for i in 0..3 {
            affine[i][i] = voxel_size[i];
        }
    }
    let descrip = &bytes[148..228];
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(descrip.len());
    let description = String::from_utf8_lossy(&descrip[..end]).into_owned();

    let header = VolumeHeader { dims, voxel_size, datatype, affine, description };
    let count = header.element_count();
    let needed = count * datatype.size();
    if bytes.len() < vox_offset + needed {
        return Err(Error::Nifti(format!(
            "truncated payload: need {needed} bytes at offset {vox_offset}, file has {}",
            bytes.len()
        )));
    }
    let payload = Reader { bytes: &bytes[vox_offset..], little };
    let mut data: Vec<f64> = match datatype {
        Datatype::U8 => payload.bytes[..count].iter().map(|&b| f64::from(b)).collect(),
        Datatype::F32 => (0..count).map(|i| f64::from(payload.f32(4 * i))).collect(),
        Datatype::F64 => (0..count).map(|i| payload.f64(8 * i)).collect(),
    };
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        let (s, b) = (f64::from(slope), f64::from(inter));
        data.iter_mut().for_each(|v| *v = *v * s + b);
    }
    Ok((header, data))
}

/// Encodes a header and x-fastest array as a little-endian single-file
/// NIfTI-1 image. Values are cast to the header datatype (`uint8` values are
/// rounded and saturated).
pub fn write_nifti(header: &VolumeHeader, data: &[f64]) -> Result<Vec<u8>> {
    header.validate()?;
    if header.element_count() != data.len() {
        return Err(Error::Dimension(format!(
            "header extents {:?} hold {} values, array has {}",
            header.dims,
            header.element_count(),
            data.len()
        )));
    }
    let mut out = vec![0u8; DATA_OFFSET + data.len() * header.datatype.size()];
    {
        let h = &mut out[..HEADER_SIZE];
        let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
        put(0, &348i32.to_le_bytes());
        put(38, b"r");
        put(40, &(header.dims.len() as i16).to_le_bytes());
        for i in 0..7 {
            let d = header.dims.get(i).copied().unwrap_or(1) as i16;
            put(42 + 2 * i, &d.to_le_bytes());
        }
        put(70, &header.datatype.code().to_le_bytes());
        put(72, &((header.datatype.size() * 8) as i16).to_le_bytes());
        put(76, &1f32.to_le_bytes());
        for (i, v) in header.voxel_size.iter().enumerate() {
            put(80 + 4 * i, &(*v as f32).to_le_bytes());
        }
        put(92, &1f32.to_le_bytes());
        put(108, &(DATA_OFFSET as f32).to_le_bytes());
        put(112, &1f32.to_le_bytes());
        // xyzt_units: mm, s
        put(123, &[2 | 8]);
        let desc = header.description.as_bytes();
        put(148, &desc[..desc.len().min(79)]);
        put(252, &0i16.to_le_bytes());
        put(254, &1i16.to_le_bytes());
        for (row, base) in [280, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                put(base + 4 * c, &(header.affine[row][c] as f32).to_le_bytes());
            }
        }
        put(344, b"n+1\0");
    }
    let payload = &mut out[DATA_OFFSET..];
    match header.datatype {
        Datatype::U8 => {
            for (slot, &v) in payload.iter_mut().zip(data) {
                *slot = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Datatype::F32 => {
            for (chunk, &v) in payload.chunks_exact_mut(4).zip(data) {
                chunk.copy_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Datatype::F64 => {
            for (chunk, &v) in payload.chunks_exact_mut(8).zip(data) {
                chunk.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_2x2x2_float32() {
        let h = VolumeHeader::new(&[2, 2, 2], [1.0; 3], Datatype::F32);
        let bytes = write_nifti(&h, &[0.0; 8]).unwrap();
        let (h2, d) = read_nifti(&bytes).unwrap();
        assert_eq!(h2.dims, vec![2, 2, 2]);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_file_size() {
        let h = VolumeHeader::new(&[1, 1, 1], [1.0; 3], Datatype::F32);
        let bytes = write_nifti(&h, &[7.0]).unwrap();
        assert_eq!(bytes.len(), 352 + 4);
        assert_eq!(read_nifti(&bytes).unwrap().1, vec![7.0]);
    }

    #[test]
    fn float64_4d_round_trip() {
        let h = VolumeHeader::new(&[2, 2, 2, 3], [1.5, 1.5, 2.0], Datatype::F64);
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 1e3).collect();
        let (h2, d) = read_nifti(&write_nifti(&h, &data).unwrap()).unwrap();
        assert_eq!(d, data);
        assert_eq!(h2.dims, h.dims);
        assert_eq!(h2.voxel_size, [1.5, 1.5, 2.0]);
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let h = VolumeHeader::new(&[2, 2, 2], [1.0; 3], Datatype::F32);
        assert!(matches!(write_nifti(&h, &[0.0; 7]), Err(Error::Dimension(_))));
    }

    #[test]
    fn detached_magic_is_rejected() {
        let h = VolumeHeader::new(&[1, 1, 1], [1.0; 3], Datatype::F32);
        let mut bytes = write_nifti(&h, &[1.0]).unwrap();
        bytes[344..348].copy_from_slice(b"ni1\0");
        let err = read_nifti(&bytes).unwrap_err();
        assert!(err.to_string().contains("detached"), "{err}");
    }

    #[test]
    fn truncated_and_unsupported() {
        let h = VolumeHeader::new(&[2, 2, 2], [1.0; 3], Datatype::F64);
        let bytes = write_nifti(&h, &[1.0; 8]).unwrap();
        assert!(read_nifti(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[70..72].copy_from_slice(&4i16.to_le_bytes());
        assert!(read_nifti(&bad).unwrap_err().to_string().contains("datatype"));
    }

    #[test]
    fn big_endian_header_is_read() {
        // Hand-build a big-endian 1x1x2 float32 file.
        let mut b = vec![0u8; 352 + 8];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        b[40..42].copy_from_slice(&3i16.to_be_bytes());
        for (i, d) in [1i16, 1, 2].iter().enumerate() {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_be_bytes());
        for i in 0..3 {
            b[80 + 4 * i..84 + 4 * i].copy_from_slice(&2f32.to_be_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b[352..356].copy_from_slice(&1.25f32.to_be_bytes());
        b[356..360].copy_from_slice(&(-3f32).to_be_bytes());
        let (h, d) = read_nifti(&b).unwrap();
        assert_eq!(h.dims, vec![1, 1, 2]);
        assert_eq!(h.voxel_size, [2.0; 3]);
        assert_eq!(d, vec![1.25, -3.0]);
    }

    #[test]
    fn scaling_is_applied() {
        let h = VolumeHeader::new(&[2], [1.0; 3], Datatype::U8);
        let mut bytes = write_nifti(&h, &[1.0, 3.0]).unwrap();
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(read_nifti(&bytes).unwrap().1, vec![2.5, 6.5]);
    }

    #[test]
    fn affine_and_description_survive() {
        let mut h = VolumeHeader::new(&[3, 2, 1], [2.0, 2.0, 2.0], Datatype::U8);
        h.affine[0][3] = -10.0;
        h.affine[1][3] = 4.5;
        h.description = "crop-to-multiple gamma=2".into();
        let (h2, d) = read_nifti(&write_nifti(&h, &[0., 1., 1., 0., 255., 3.]).unwrap()).unwrap();
        assert_eq!(h2, h);
        assert_eq!(d, vec![0., 1., 1., 0., 255., 3.]);
    }

    #[test]
    fn downsampled_header_doubles_voxel_size() {
        let h = VolumeHeader::new(&[4, 4, 4, 2], [1.25; 3], Datatype::F32);
        let d = h.downsampled(&[2, 2, 2, 2], 2);
        assert_eq!(d.voxel_size, [2.5; 3]);
        assert_eq!(d.affine[0][0], 2.5);
        assert_eq!(d.affine[0][3], 0.625);
    }
}
