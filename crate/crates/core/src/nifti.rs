//! NIfTI-1 reading/writing (`.nii`, `.nii.gz`, `.hdr`/`.img` pairs on read)
//! and FSL bval/bvec parsing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{spacing_affine, Affine, GradientTable, Mask3D, Volume3D, Volume4D};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_UINT16: i16 = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderInfo {
    /// `dim[0..8]` as stored.
    pub dim: [i16; 8],
    pub datatype: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub affine: Affine,
    pub description: String,
    pub big_endian: bool,
    /// `true` for `n+1` single files, `false` for `ni1` header/image pairs.
    pub single_file: bool,
}

impl NiftiHeaderInfo {
    pub fn spacing(&self) -> [f64; 3] {
        let mut s = [1.0; 3];
        for (i, v) in s.iter_mut().enumerate() {
            let p = self.pixdim[i + 1].abs() as f64;
            if p.is_finite() && p > 0.0 {
                *v = p;
            }
        }
        s
    }

    /// Slope with the "0 means 1" convention applied.
    pub fn effective_slope(&self) -> f64 {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            1.0
        } else {
            self.scl_slope as f64
        }
    }

    pub fn effective_inter(&self) -> f64 {
        if self.scl_inter.is_finite() && self.scl_slope != 0.0 {
            self.scl_inter as f64
        } else {
            0.0
        }
    }

    fn bytes_per_voxel(&self) -> Result<usize> {
        Ok(match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 | DT_UINT16 => 2,
            DT_INT32 | DT_FLOAT32 => 4,
            DT_FLOAT64 => 8,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    /// Spatial dims and number of volumes (dims above 4 are folded into the last axis).
    fn shape(&self) -> Result<([usize; 3], usize)> {
        let bpv = self.bytes_per_voxel()?;
        let ndim = self.dim[0] as usize;
        let raw: Vec<i64> = self.dim.iter().map(|&d| d as i64).collect();
        let mut d = [1usize; 7];
        for i in 0..ndim {
            let v = self.dim[i + 1];
            if v <= 0 {
                return Err(Error::CorruptHeader(format!("dim[{}] = {v}", i + 1)));
            }
            d[i] = v as usize;
        }
        let nd = d[3..]
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::DimensionOverflow(raw.clone()))?;
        d[..3]
            .iter()
            .try_fold(nd, |a, &b| a.checked_mul(b))
            .and_then(|n| n.checked_mul(bpv))
            .ok_or(Error::DimensionOverflow(raw))?;
        Ok(([d[0], d[1], d[2]], nd))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NiftiVolume {
    Volume3(Volume3D),
    Volume4(Volume4D),
}

impl NiftiVolume {
    /// 3D data is promoted to a single-direction 4D volume.
    pub fn into_4d(self) -> Volume4D {
        match self {
            NiftiVolume::Volume4(v) => v,
            NiftiVolume::Volume3(v) => {
                let d = v.dims();
                let (sp, af) = (v.spacing(), *v.affine());
                Volume4D::new([d[0], d[1], d[2], 1], v.into_data(), sp, af)
                    .expect("3D volume is a valid single-direction 4D volume")
            }
        }
    }

    /// Fails for 4D data with more than one volume.
    pub fn into_3d(self) -> Result<Volume3D> {
        match self {
            NiftiVolume::Volume3(v) => Ok(v),
            NiftiVolume::Volume4(v) if v.n_directions() == 1 => Ok(v.direction_volume(0)),
            NiftiVolume::Volume4(v) => Err(Error::DimensionMismatch(format!(
                "expected a 3D volume, found {} volumes",
                v.n_directions()
            ))),
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

/// Parses the fixed 348-byte header.
pub fn parse_header(buf: &[u8]) -> Result<NiftiHeaderInfo> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::CorruptHeader(format!(
            "{} bytes, need at least {HEADER_SIZE}",
            buf.len()
        )));
    }
    let le = Cursor {
        buf,
        big_endian: false,
    };
    let big_endian = !(1..=7).contains(&le.i16(40));
    let c = Cursor { buf, big_endian };
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let sizeof_hdr = c.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::CorruptHeader(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    let magic = &buf[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::CorruptHeader(format!("bad magic {magic:?}"))),
    };

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = c.i16(40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = c.f32(76 + 4 * i);
    }
    let description = String::from_utf8_lossy(&buf[148..228])
        .trim_end_matches('\0')
        .to_string();

    let mut info = NiftiHeaderInfo {
        dim,
        datatype: c.i16(70),
        scl_slope: c.f32(112),
        scl_inter: c.f32(116),
        pixdim,
        vox_offset: c.f32(108),
        qform_code: c.i16(252),
        sform_code: c.i16(254),
        affine: [[0.0; 4]; 4],
        description,
        big_endian,
        single_file,
    };
    info.affine = if info.sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.f32(280 + 16 * r + 4 * j) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if info.qform_code > 0 {
        let quat = [c.f32(256), c.f32(260), c.f32(264)].map(|v| v as f64);
        let offset = [c.f32(268), c.f32(272), c.f32(276)].map(|v| v as f64);
        qform_affine(quat, offset, info.spacing(), pixdim[0])
    } else {
        spacing_affine(info.spacing())
    };
    Ok(info)
}

/// Rotation from quaternion (b, c, d), scaled by spacing, qfac in `pixdim[0]`.
fn qform_affine(q: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f32) -> Affine {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out[3][3] = 1.0;
    out
}

fn decode_payload(info: &NiftiHeaderInfo, payload: &[u8], n: usize) -> Result<Vec<f64>> {
    let bpv = info.bytes_per_voxel()?;
    if payload.len() < n * bpv {
        return Err(Error::CorruptHeader(format!(
            "payload holds {} bytes, header requires {}",
            payload.len(),
            n * bpv
        )));
    }
    let c = Cursor {
        buf: payload,
        big_endian: info.big_endian,
    };
    let raw: Box<dyn Fn(usize) -> f64> = match info.datatype {
        DT_UINT8 => Box::new(|i| payload[i] as f64),
        DT_INT16 => Box::new(|i| c.i16(2 * i) as f64),
        DT_UINT16 => Box::new(|i| u16::from_le_bytes(c.bytes(2 * i)) as f64),
        DT_INT32 => Box::new(|i| c.i32(4 * i) as f64),
        DT_FLOAT32 => Box::new(|i| c.f32(4 * i) as f64),
        DT_FLOAT64 => Box::new(|i| f64::from_le_bytes(c.bytes(8 * i))),
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let (slope, inter) = (info.effective_slope(), info.effective_inter());
    let identity = slope == 1.0 && inter == 0.0;
    Ok((0..n)
        .map(|i| {
            if identity {
                raw(i)
            } else {
                raw(i) * slope + inter
            }
        })
        .collect())
}

fn image_path_for(header_path: &Path) -> PathBuf {
    let s = header_path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else {
        header_path.with_extension("img")
    }
}

/// Reads a volume and its header.
pub fn read_nifti_with_header(path: impl AsRef<Path>) -> Result<(NiftiVolume, NiftiHeaderInfo)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let info = parse_header(&bytes)?;
    let (sdims, nd) = info.shape()?;
    let n = sdims.iter().product::<usize>() * nd;

    let data = if info.single_file {
        let off = info.vox_offset as usize;
        let off = if off < VOX_OFFSET { VOX_OFFSET } else { off };
        if bytes.len() < off {
            return Err(Error::CorruptHeader(format!(
                "vox_offset {off} beyond end of file ({} bytes)",
                bytes.len()
            )));
        }
        decode_payload(&info, &bytes[off..], n)?
    } else {
        let img = read_all(&image_path_for(path))?;
        let off = info.vox_offset.max(0.0) as usize;
        decode_payload(&info, img.get(off..).unwrap_or(&[]), n)?
    };

    let (spacing, affine) = (info.spacing(), info.affine);
    let ndim = info.dim[0];
    let vol = if ndim >= 4 {
        NiftiVolume::Volume4(Volume4D::new(
            [sdims[0], sdims[1], sdims[2], nd],
            data,
            spacing,
            affine,
        )?)
    } else {
        NiftiVolume::Volume3(Volume3D::new(sdims, data, spacing, affine)?)
    };
    Ok((vol, info))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    read_nifti_with_header(path).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputType {
    Float32,
    /// Values are rounded and clamped to `[0, 255]`.
    Uint8,
}

fn is_gz(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn build_header(
    dims: &[usize],
    spacing: [f64; 3],
    affine: &Affine,
    datatype: i16,
    description: &str,
) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 =
        |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for (i, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d)
            .map_err(|_| Error::DimensionOverflow(dims.iter().map(|&d| d as i64).collect()))?;
        put_i16(&mut h, 42 + 2 * i, d);
    }
    for i in dims.len()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_FLOAT32 => 32,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for i in 0..7 {
        let p = if i < 3 { spacing[i] as f32 } else { 1.0 };
        put_f32(&mut h, 80 + 4 * i, p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2 | 8; // mm, s
    let desc = description.as_bytes();
    let len = desc.len().min(79);
    h[148..148 + len].copy_from_slice(&desc[..len]);
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 1);
    for r in 0..3 {
        for j in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * j, affine[r][j] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

fn encode(data: &[f64], ty: OutputType) -> (i16, Vec<u8>) {
    match ty {
        OutputType::Float32 => (
            DT_FLOAT32,
            data.iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
        ),
        OutputType::Uint8 => (
            DT_UINT8,
            data.iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        ),
    }
}

pub fn write_nifti_3d(vol: &Volume3D, path: impl AsRef<Path>, ty: OutputType) -> Result<()> {
    let (dt, payload) = encode(vol.data(), ty);
    let header = build_header(&vol.dims(), vol.spacing(), vol.affine(), dt, "akmppca")?;
    write_bytes(path.as_ref(), &header, &payload)
}

pub fn write_nifti_4d(vol: &Volume4D, path: impl AsRef<Path>, ty: OutputType) -> Result<()> {
    let (dt, payload) = encode(vol.data(), ty);
    let header = build_header(&vol.dims(), vol.spacing(), vol.affine(), dt, "akmppca")?;
    write_bytes(path.as_ref(), &header, &payload)
}

/// Float32 single-file output; `.gz` extension selects gzip.
pub fn write_nifti(vol: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    match vol {
        NiftiVolume::Volume3(v) => write_nifti_3d(v, path, OutputType::Float32),
        NiftiVolume::Volume4(v) => write_nifti_4d(v, path, OutputType::Float32),
    }
}

pub fn write_mask(
    mask: &Mask3D,
    spacing: [f64; 3],
    affine: Affine,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_nifti_3d(&mask.to_volume(spacing, affine), path, OutputType::Uint8)
}

fn parse_numbers(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        msg: format!("not a number: {t:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

/// FSL layout: bvals on one line (or one per line), bvecs as 3 rows x N columns.
pub fn read_gradient_table(
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
) -> Result<GradientTable> {
    let (bval_path, bvec_path) = (bval_path.as_ref(), bvec_path.as_ref());
    let bvals: Vec<f64> = parse_numbers(bval_path)?.into_iter().flatten().collect();
    let rows = parse_numbers(bvec_path)?;
    let bvecs: Vec<[f64; 3]> = if rows.len() == 3 {
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse {
                path: bvec_path.to_path_buf(),
                msg: "bvec rows have different lengths".into(),
            });
        }
        (0..n)
            .map(|i| [rows[0][i], rows[1][i], rows[2][i]])
            .collect()
    } else if !rows.is_empty() && rows.iter().all(|r| r.len() == 3) {
        // one vector per line
        rows.iter().map(|r| [r[0], r[1], r[2]]).collect()
    } else {
        return Err(Error::Parse {
            path: bvec_path.to_path_buf(),
            msg: format!("expected 3 rows, found {}", rows.len()),
        });
    };
    if bvals.len() != bvecs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} b-values in {}, {} b-vectors in {}",
            bvals.len(),
            bval_path.display(),
            bvecs.len(),
            bvec_path.display()
        )));
    }
    GradientTable::new(bvals, bvecs)
}

pub fn write_gradient_table(
    gtab: &GradientTable,
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
) -> Result<()> {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        it.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
    };
    let bvals = join(&mut gtab.bvals().iter().copied()) + "\n";
    let mut bvecs = String::new();
    for a in 0..3 {
        bvecs += &join(&mut gtab.bvecs().iter().map(|v| v[a]));
        bvecs.push('\n');
    }
    let (bp, vp) = (bval_path.as_ref(), bvec_path.as_ref());
    std::fs::write(bp, bvals).map_err(|e| Error::io(bp, e))?;
    std::fs::write(vp, bvecs).map_err(|e| Error::io(vp, e))
}
