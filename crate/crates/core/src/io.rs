//! Binary containers, trace and report CSVs, grayscale image loading and plot images.
//!
//! Every container shares one little-endian layout:
//!
//! ```text
//! magic [4] | version u32 | endian marker u32 (0x01020304) | entry count u32
//! per entry: name length u16 | name (UTF-8) | dtype u8 | rank u8 | shape u64 x rank
//!            | byte offset u64 | byte length u64
//! payload (offsets are relative to its start)
//! ```
//!
//! Complex entries store interleaved `(re, im)` float64 pairs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::denoise::{ConvLayer, CnnWeights};
use crate::error::{Error, FormatError, Result};
use crate::forward::{Acquisition, ContrastVolume, ForwardConvention, MeasurementSet, TransferFunctionStack};
use crate::solver::IterRecord;
use crate::tensor::{ComplexImage, RealVolume};
use crate::theory::TheoryReport;

pub const FORMAT_VERSION: u32 = 1;
pub const ENDIAN_MARKER: u32 = 0x0102_0304;
pub const MEASUREMENT_MAGIC: [u8; 4] = *b"IDTM";
pub const TRANSFER_MAGIC: [u8; 4] = *b"IDTF";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"DNWT";
pub const VOLUME_MAGIC: [u8; 4] = *b"IDTV";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    F32 = 2,
    C128 = 3,
    U8 = 4,
    U64 = 5,
    Utf8 = 6,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => DType::F64,
            2 => DType::F32,
            3 => DType::C128,
            4 => DType::U8,
            5 => DType::U64,
            6 => DType::Utf8,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::F32 => 4,
            DType::C128 => 16,
            DType::U8 | DType::Utf8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryDescriptor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub entries: Vec<EntryDescriptor>,
}

/// In-memory container: named, typed, shaped byte blobs in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Container {
    entries: Vec<(String, DType, Vec<u64>, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, dtype: DType, shape: Vec<u64>, bytes: Vec<u8>) {
        debug_assert_eq!(shape.iter().product::<u64>() as usize * dtype.width(), bytes.len());
        self.entries.push((name.to_owned(), dtype, shape, bytes));
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F64, to_u64(shape), bytes);
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F32, to_u64(shape), bytes);
    }

    pub fn put_c128(&mut self, name: &str, shape: &[usize], data: impl Iterator<Item = Complex64>) {
        let bytes = data.flat_map(|c| c.re.to_le_bytes().into_iter().chain(c.im.to_le_bytes())).collect();
        self.push(name, DType::C128, to_u64(shape), bytes);
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.put_f64(name, &[], &[v]);
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.push(name, DType::U64, Vec::new(), v.to_le_bytes().to_vec());
    }

    pub fn put_u8(&mut self, name: &str, v: u8) {
        self.push(name, DType::U8, Vec::new(), vec![v]);
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.push(name, DType::Utf8, vec![s.len() as u64], s.as_bytes().to_vec());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.0 == name)
    }

    fn get(&self, name: &str, dtype: DType) -> Result<(&[u64], &[u8])> {
        let (_, d, shape, bytes) = self
            .entries
            .iter()
            .find(|e| e.0 == name)
            .ok_or_else(|| FormatError::MissingEntry(name.to_owned()))?;
        if *d != dtype {
            return Err(FormatError::Corrupt(format!("entry {name:?} has dtype {d:?}, expected {dtype:?}")).into());
        }
        Ok((shape, bytes))
    }

    pub fn f64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, bytes) = self.get(name, DType::F64)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((from_u64(shape), data))
    }

    pub fn f32_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (shape, bytes) = self.get(name, DType::F32)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((from_u64(shape), data))
    }

    pub fn c128_array(&self, name: &str) -> Result<(Vec<usize>, Vec<Complex64>)> {
        let (shape, bytes) = self.get(name, DType::C128)?;
        let data = bytes
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        Ok((from_u64(shape), data))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (shape, data) = self.f64_array(name)?;
        if !shape.is_empty() {
            return Err(FormatError::Corrupt(format!("entry {name:?} should be a scalar")).into());
        }
        Ok(data[0])
    }

    pub fn u64_value(&self, name: &str) -> Result<u64> {
        let (_, bytes) = self.get(name, DType::U64)?;
        Ok(u64::from_le_bytes(bytes.try_into().map_err(|_| FormatError::Corrupt(format!("entry {name:?} should be a scalar")))?))
    }

    pub fn u8_value(&self, name: &str) -> Result<u8> {
        let (_, bytes) = self.get(name, DType::U8)?;
        match bytes {
            [v] => Ok(*v),
            _ => Err(FormatError::Corrupt(format!("entry {name:?} should be a scalar")).into()),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        let (_, bytes) = self.get(name, DType::Utf8)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::Corrupt(format!("entry {name:?} is not UTF-8")).into())
    }

    pub fn to_bytes(&self, magic: [u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, dtype, shape, bytes) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*dtype as u8);
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, _, _, bytes) in &self.entries {
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<(ContainerHeader, Container)> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4, "magic")?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        let marker = r.u32("endian marker")?;
        if marker != ENDIAN_MARKER {
            return Err(FormatError::Corrupt(format!("endian marker {marker:#010x}, expected {ENDIAN_MARKER:#010x}")).into());
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "entry name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
                .map_err(|_| FormatError::Corrupt(format!("entry {k} name is not UTF-8")))?;
            let code = r.take(1, "entry dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| FormatError::Corrupt(format!("entry {name:?}: unknown dtype {code}")))?;
            let rank = r.take(1, "entry rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("entry shape")?);
            }
            let offset = r.u64("entry offset")?;
            let length = r.u64("entry length")?;
            let expected = shape
                .iter()
                .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::Corrupt(format!("entry {name:?}: shape overflows")))?;
            if expected != length {
                return Err(FormatError::Corrupt(format!(
                    "entry {name:?}: shape {shape:?} needs {expected} bytes, descriptor says {length}"
                ))
                .into());
            }
            entries.push(EntryDescriptor {
                name,
                dtype,
                shape,
                offset,
                length,
            });
        }
        let payload = &bytes[r.pos..];
        let mut spans: Vec<(u64, u64, &str)> = entries.iter().map(|e| (e.offset, e.offset + e.length, e.name.as_str())).collect();
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(FormatError::Corrupt(format!("entries {:?} and {:?} overlap", pair[0].2, pair[1].2)).into());
            }
        }
        let mut container = Container::new();
        for e in &entries {
            let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64).ok_or_else(|| {
                FormatError::Truncated(format!(
                    "entry {:?} ends at byte {} of a {}-byte payload",
                    e.name,
                    e.offset + e.length,
                    payload.len()
                ))
            })?;
            if container.contains(&e.name) {
                return Err(FormatError::Corrupt(format!("duplicate entry {:?}", e.name)).into());
            }
            container.push(&e.name, e.dtype, e.shape.clone(), payload[e.offset as usize..end as usize].to_vec());
        }
        Ok((
            ContainerHeader {
                magic,
                version,
                entries,
            },
            container,
        ))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated(format!("header ends inside the {what}")).into());
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn to_u64(shape: &[usize]) -> Vec<u64> {
    shape.iter().map(|&d| d as u64).collect()
}

fn from_u64(shape: &[u64]) -> Vec<usize> {
    shape.iter().map(|&d| d as usize).collect()
}

fn expect_rank<'s>(name: &str, shape: &'s [usize], rank: usize) -> Result<&'s [usize]> {
    if shape.len() != rank {
        return Err(FormatError::Invariant(format!("{name} must have rank {rank}, found shape {shape:?}")).into());
    }
    Ok(shape)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// Metadata names follow the acquisition parameter table.
const META: [&str; 7] = [
    "wavelength_of_led_light_um",
    "background_refractive_index",
    "led_z_position_mm",
    "sample_z_position_um",
    "objective_magnification",
    "objective_numerical_aperture",
    "camera_pixel_size_um",
];

fn put_acquisition(c: &mut Container, a: &Acquisition) {
    let values = [
        a.wavelength_um,
        a.background_index,
        a.z_led_mm,
        a.sample_z_um,
        a.magnification,
        a.na,
        a.pixel_size_um,
    ];
    for (name, v) in META.iter().zip(values) {
        c.put_scalar(name, v);
    }
}

fn get_acquisition(c: &Container) -> Result<Acquisition> {
    let v = META.iter().map(|n| c.scalar(n)).collect::<Result<Vec<_>>>()?;
    Ok(Acquisition {
        wavelength_um: v[0],
        background_index: v[1],
        z_led_mm: v[2],
        sample_z_um: v[3],
        magnification: v[4],
        na: v[5],
        pixel_size_um: v[6],
    })
}

fn get_convention(c: &Container) -> Result<ForwardConvention> {
    let code = c.u8_value("convention")?;
    ForwardConvention::from_code(code).ok_or_else(|| FormatError::Invariant(format!("unknown forward convention code {code}")).into())
}

fn put_volume(c: &mut Container, prefix: &str, x: &ContrastVolume) {
    let (s, h, w) = x.dim();
    c.put_f64(&format!("{prefix}Re"), &[s, h, w], x.re.as_slice());
    c.put_f64(&format!("{prefix}Im"), &[s, h, w], x.im.as_slice());
}

fn get_volume(c: &Container, prefix: &str) -> Result<ContrastVolume> {
    let part = |suffix: &str| -> Result<RealVolume> {
        let name = format!("{prefix}{suffix}");
        let (shape, data) = c.f64_array(&name)?;
        let shape = expect_rank(&name, &shape, 3)?;
        RealVolume::new(Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).expect("length checked by the header"))
    };
    ContrastVolume::new(part("Re")?, part("Im")?)
}

pub fn measurements_to_bytes(m: &MeasurementSet) -> Vec<u8> {
    let mut c = Container::new();
    let (h, w) = m.images[0].dim();
    let flat: Vec<f64> = m.images.iter().flat_map(|img| img.iter().copied()).collect();
    c.put_f64("y", &[m.len(), h, w], &flat);
    if let Some(gt) = &m.ground_truth {
        put_volume(&mut c, "groundTruth", gt);
    }
    put_acquisition(&mut c, &m.acquisition);
    c.put_u64("seed", m.seed);
    c.put_u8("convention", m.convention.code());
    if let Some(db) = m.input_snr_db {
        c.put_scalar("input_snr_db", db);
    }
    c.to_bytes(MEASUREMENT_MAGIC)
}

pub fn measurements_from_bytes(bytes: &[u8]) -> Result<MeasurementSet> {
    let (_, c) = Container::from_bytes(bytes, MEASUREMENT_MAGIC)?;
    let (shape, data) = c.f64_array("y")?;
    let shape = expect_rank("y", &shape, 3)?;
    let plane = shape[1] * shape[2];
    let images = (0..shape[0])
        .map(|i| Array2::from_shape_vec((shape[1], shape[2]), data[i * plane..(i + 1) * plane].to_vec()).expect("sized"))
        .collect();
    let mut m = MeasurementSet::new(images)?;
    if c.contains("groundTruthRe") {
        m.ground_truth = Some(get_volume(&c, "groundTruth")?);
    }
    m.acquisition = get_acquisition(&c)?;
    m.seed = c.u64_value("seed")?;
    m.convention = get_convention(&c)?;
    m.input_snr_db = if c.contains("input_snr_db") { Some(c.scalar("input_snr_db")?) } else { None };
    Ok(m)
}

pub fn write_measurements(path: &Path, m: &MeasurementSet) -> Result<()> {
    write_atomic(path, &measurements_to_bytes(m))
}

pub fn read_measurements(path: &Path) -> Result<MeasurementSet> {
    measurements_from_bytes(&fs::read(path)?)
}

pub fn transfer_functions_to_bytes(tf: &TransferFunctionStack) -> Vec<u8> {
    let mut c = Container::new();
    let shape = [tf.illuminations(), tf.slices(), tf.height(), tf.width()];
    c.put_c128("hRe", &shape, tf.h_re_all().iter().flat_map(|h| h.as_slice().iter().copied()));
    c.put_c128("hIm", &shape, tf.h_im_all().iter().flat_map(|h| h.as_slice().iter().copied()));
    c.put_scalar("slice_spacing_um", tf.slice_spacing_um);
    put_acquisition(&mut c, &tf.acquisition);
    c.put_u8("convention", tf.convention.code());
    c.put_u8("frequency_diagonal", tf.frequency_diagonal as u8);
    c.to_bytes(TRANSFER_MAGIC)
}

pub fn transfer_functions_from_bytes(bytes: &[u8]) -> Result<TransferFunctionStack> {
    let (_, c) = Container::from_bytes(bytes, TRANSFER_MAGIC)?;
    let images = |name: &str| -> Result<(Vec<usize>, Vec<ComplexImage>)> {
        let (shape, data) = c.c128_array(name)?;
        let shape = expect_rank(name, &shape, 4)?.to_vec();
        let plane = shape[2] * shape[3];
        let imgs = data
            .chunks_exact(plane.max(1))
            .map(|chunk| ComplexImage::new(shape[3], shape[2], chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((shape, imgs))
    };
    let (shape_re, h_re) = images("hRe")?;
    let (shape_im, h_im) = images("hIm")?;
    if shape_re != shape_im {
        return Err(FormatError::Invariant(format!("hRe shape {shape_re:?} differs from hIm shape {shape_im:?}")).into());
    }
    let mut tf = TransferFunctionStack::new(shape_re[0], shape_re[1], h_re, h_im, c.scalar("slice_spacing_um")?, get_acquisition(&c)?)?;
    tf.convention = get_convention(&c)?;
    tf.frequency_diagonal = c.u8_value("frequency_diagonal")? != 0;
    Ok(tf)
}

pub fn write_transfer_functions(path: &Path, tf: &TransferFunctionStack) -> Result<()> {
    write_atomic(path, &transfer_functions_to_bytes(tf))
}

pub fn read_transfer_functions(path: &Path) -> Result<TransferFunctionStack> {
    transfer_functions_from_bytes(&fs::read(path)?)
}

pub fn weights_to_bytes(w: &CnnWeights) -> Vec<u8> {
    let mut c = Container::new();
    c.put_u64("layer_count", w.layers.len() as u64);
    for (k, layer) in w.layers.iter().enumerate() {
        c.put_f32(
            &format!("layer{k}.weight"),
            &[layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w],
            &layer.weight,
        );
        c.put_f32(&format!("layer{k}.bias"), &[layer.out_channels], &layer.bias);
    }
    c.put_u8("residual", w.residual as u8);
    c.put_scalar("sigma", w.sigma);
    if let Some(norms) = &w.spectral_norms {
        c.put_f64("spectral_norms", &[norms.len()], norms);
    }
    c.put_str("metadata", &w.metadata);
    c.to_bytes(WEIGHTS_MAGIC)
}

/// Decodes and validates network weights; architecture violations name the invariant.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<CnnWeights> {
    let (_, c) = Container::from_bytes(bytes, WEIGHTS_MAGIC)?;
    let n = c.u64_value("layer_count")? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for k in 0..n {
        let name = format!("layer{k}.weight");
        let (shape, weight) = c.f32_array(&name)?;
        let shape = expect_rank(&name, &shape, 4)?;
        let (_, bias) = c.f32_array(&format!("layer{k}.bias"))?;
        layers.push(ConvLayer {
            out_channels: shape[0],
            in_channels: shape[1],
            kernel_h: shape[2],
            kernel_w: shape[3],
            weight,
            bias,
        });
    }
    let w = CnnWeights {
        layers,
        residual: c.u8_value("residual")? != 0,
        sigma: c.scalar("sigma")?,
        spectral_norms: if c.contains("spectral_norms") { Some(c.f64_array("spectral_norms")?.1) } else { None },
        metadata: c.string("metadata")?,
    };
    w.validate().map_err(|e| match e {
        Error::InvalidWeights(msg) => Error::Format(FormatError::Invariant(msg)),
        other => other,
    })?;
    Ok(w)
}

pub fn write_weights(path: &Path, w: &CnnWeights) -> Result<()> {
    write_atomic(path, &weights_to_bytes(w))
}

pub fn read_weights(path: &Path) -> Result<CnnWeights> {
    weights_from_bytes(&fs::read(path)?)
}

pub fn volume_to_bytes(x: &ContrastVolume) -> Vec<u8> {
    let mut c = Container::new();
    put_volume(&mut c, "x", x);
    c.to_bytes(VOLUME_MAGIC)
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<ContrastVolume> {
    let (_, c) = Container::from_bytes(bytes, VOLUME_MAGIC)?;
    get_volume(&c, "x")
}

pub fn write_volume(path: &Path, x: &ContrastVolume) -> Result<()> {
    write_atomic(path, &volume_to_bytes(x))
}

/// Reads a volume container, or the ground truth stored in a measurement container.
pub fn read_volume(path: &Path) -> Result<ContrastVolume> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&MEASUREMENT_MAGIC) {
        return measurements_from_bytes(&bytes)?
            .ground_truth
            .ok_or_else(|| FormatError::MissingEntry("groundTruthRe".into()).into());
    }
    volume_from_bytes(&bytes)
}

pub const TRACE_HEADER: [&str; 7] = ["iter", "ghat_sq_norm", "g_sq_norm", "fidelity", "snr_db", "wall_seconds", "batch_indices"];

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(FormatError::Corrupt(format!("csv: {other:?}"))),
    }
}

/// Streams iteration records as CSV rows, flushing after each one.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(TRACE_HEADER).map_err(csv_error)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &IterRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let indices = r.batch_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
        self.inner
            .write_record([
                r.iter.to_string(),
                r.ghat_sq_norm.to_string(),
                opt(r.g_sq_norm),
                r.fidelity.to_string(),
                opt(r.snr_db),
                r.wall_seconds.to_string(),
                indices,
            ])
            .map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// One parsed trace row; fields the writer left empty are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub ghat_sq_norm: f64,
    pub g_sq_norm: Option<f64>,
    pub fidelity: f64,
    pub snr_db: Option<f64>,
    pub wall_seconds: f64,
    pub batch_indices: Vec<usize>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(FormatError::Corrupt(format!("unexpected trace header {header:?}")).into());
    }
    let bad = |field: &str, v: &str| Error::Format(FormatError::Corrupt(format!("trace column {field}: cannot parse {v:?}")));
    let num = |field: &str, v: &str| v.parse::<f64>().map_err(|_| bad(field, v));
    let opt = |field: &str, v: &str| if v.is_empty() { Ok(None) } else { num(field, v).map(Some) };
    let mut rows = Vec::new();
    for record in reader.records() {
        let rec = record.map_err(csv_error)?;
        rows.push(TraceRow {
            iter: rec[0].parse().map_err(|_| bad("iter", &rec[0]))?,
            ghat_sq_norm: num("ghat_sq_norm", &rec[1])?,
            g_sq_norm: opt("g_sq_norm", &rec[2])?,
            fidelity: num("fidelity", &rec[3])?,
            snr_db: opt("snr_db", &rec[4])?,
            wall_seconds: num("wall_seconds", &rec[5])?,
            batch_indices: if rec[6].is_empty() {
                Vec::new()
            } else {
                rec[6].split(';').map(|s| s.parse().map_err(|_| bad("batch_indices", s))).collect::<Result<_>>()?
            },
        });
    }
    Ok(rows)
}

/// Per-iteration CSV of the convergence suite: one row per batch size, seed and `t`.
pub fn theory_report_csv(report: &TheoryReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["batch", "seed", "t", "running_average", "bound", "g_sq_norm"]).map_err(csv_error)?;
    for b in &report.batches {
        for s in &b.seeds {
            for (t, bound) in b.bound.iter().enumerate() {
                let avg = s.running_average.get(t).map(|v| v.to_string()).unwrap_or_default();
                let g = s.g_sq.get(t).filter(|v| v.is_finite()).map(|v| v.to_string()).unwrap_or_default();
                w.write_record([b.batch.to_string(), s.seed.to_string(), (t + 1).to_string(), avg, bound.to_string(), g])
                    .map_err(csv_error)?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn theory_report_summary(report: &TheoryReport) -> String {
    let mut s = format!(
        "L = {:.6e}, tau = {}, ||x0 - x*||^2 = {:.6e}, ||x*|| = {:.6e}\n",
        report.lipschitz, report.tau, report.dist0_sq, report.x_star_norm
    );
    for b in &report.batches {
        s += &format!(
            "B = {:>3}: gamma = {:.6e}, nu^2 = {:.6e}, bound held on {}/{} seeds, floor = {:.6e}, mean min ||G||^2 = {:.6e}\n",
            b.batch,
            b.gamma,
            b.nu2,
            b.pass_count(),
            b.seeds.len(),
            b.floor(),
            b.mean_min_g_sq()
        );
    }
    s
}

/// Loads an 8- or 16-bit grayscale (or colour, converted to luma) image as values in `[0, 1]`.
pub fn load_grayscale(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| FormatError::Corrupt(format!("cannot decode image {}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / u16::MAX as f64
    }))
}

/// Renders one or more `(x, y)` series as lines on a white canvas with a frame.
/// Non-finite points are skipped.
pub fn plot_lines(path: &Path, series: &[Vec<(f64, f64)>], width: u32, height: u32) -> Result<()> {
    const COLOURS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];
    let mut canvas = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let margin = 20.0;
    let points = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::InvalidParameter("nothing to plot".into()));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let to_px = |x: f64, y: f64| (margin + (x - x0) / (x1 - x0) * pw, margin + (1.0 - (y - y0) / (y1 - y0)) * ph);
    let frame = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)];
    for pair in frame.windows(2) {
        draw_line(&mut canvas, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), [0, 0, 0]);
    }
    for (k, s) in series.iter().enumerate() {
        let finite: Vec<_> = s.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        for pair in finite.windows(2) {
            draw_line(&mut canvas, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), COLOURS[k % COLOURS.len()]);
        }
    }
    let mut png = Vec::new();
    canvas
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    write_atomic(path, &png)
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), colour: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(colour));
        }
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidParameter(format!("config line {}: expected key = value, found {line:?}", n + 1)));
        };
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}
