//! Case bundles, manifests and the in-pipeline preprocessing steps
//! (z-score normalization and fixed-size cropping).
//!
//! A bundle is a directory holding `header.json` plus one raw file per
//! sequence (`t1.raw`, `t1c.raw`, `t2.raw`, `flair.raw`: little-endian f32 in
//! `[z][y][x]` order) and an optional `mask.raw` (u8 labels 0..=3).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MRI sequences in model input-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    T1,
    T1c,
    T2,
    Flair,
}

impl Sequence {
    pub const ALL: [Sequence; 4] = [Sequence::T1, Sequence::T1c, Sequence::T2, Sequence::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sequence::T1 => "t1",
            Sequence::T1c => "t1c",
            Sequence::T2 => "t2",
            Sequence::Flair => "flair",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.raw", self.name())
    }

    pub fn parse(s: &str) -> Option<Sequence> {
        Sequence::ALL.into_iter().find(|q| q.name().eq_ignore_ascii_case(s))
    }
}

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Dense f32 scalar grid in `[z][y][x]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!("dims {dims:?} need {} voxels, got {}", voxel_count(dims), data.len())));
        }
        Ok(Self { dims, spacing: [1.0; 3], data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, spacing: [1.0; 3], data: vec![0.0; voxel_count(dims)] }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Segmentation labels: 0 background, 1 core, 2 rim, 3 edema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub data: Vec<u8>,
}

pub const NUM_LABELS: u8 = 4;

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!("mask dims {dims:?} need {} voxels, got {}", voxel_count(dims), data.len())));
        }
        if let Some(bad) = data.iter().find(|&&l| l >= NUM_LABELS) {
            return Err(Error::InvalidMask(format!("label {bad} outside 0..=3")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0; voxel_count(dims)] }
    }

    pub fn tumor_voxels(&self) -> usize {
        self.data.iter().filter(|&&l| l > 0).count()
    }

    /// Mean `(z, y, x)` of all tumor voxels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let [_, h, w] = self.dims;
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &l) in self.data.iter().enumerate() {
            if l > 0 {
                sum[0] += (i / (h * w)) as f64;
                sum[1] += ((i / w) % h) as f64;
                sum[2] += (i % w) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

/// One subject: four co-registered sequences, optional mask and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// Indexed by [`Sequence::index`].
    pub sequences: [Volume; 4],
    pub mask: Option<LabelVolume>,
    /// 1 = IDH-mutant, 0 = wildtype.
    pub idh_label: Option<u8>,
}

impl Case {
    pub fn new(id: impl Into<String>, sequences: [Volume; 4], mask: Option<LabelVolume>, idh_label: Option<u8>) -> Result<Self> {
        let dims = sequences[0].dims;
        if let Some(v) = sequences.iter().find(|v| v.dims != dims) {
            return Err(Error::Shape(format!("sequence dims differ: {dims:?} vs {:?}", v.dims)));
        }
        if let Some(m) = &mask {
            if m.dims != dims {
                return Err(Error::Shape(format!("mask dims {:?} differ from volume dims {dims:?}", m.dims)));
            }
        }
        if let Some(l) = idh_label {
            if l > 1 {
                return Err(Error::InvalidLabel(format!("idh label {l}")));
            }
        }
        Ok(Self { id: id.into(), sequences, mask, idh_label })
    }

    pub fn dims(&self) -> Dims {
        self.sequences[0].dims
    }

    pub fn sequence(&self, s: Sequence) -> &Volume {
        &self.sequences[s.index()]
    }

    pub fn sequence_mut(&mut self, s: Sequence) -> &mut Volume {
        &mut self.sequences[s.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleHeader {
    pub id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub sequences: Vec<String>,
    pub has_mask: bool,
    pub idh_label: Option<u8>,
}

pub const HEADER_FILE: &str = "header.json";
pub const MASK_FILE: &str = "mask.raw";

fn f32s_to_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::write(path, e))
}

/// Writes `case` as a bundle directory (created if needed).
pub fn write_case(case: &Case, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    let header = BundleHeader {
        id: case.id.clone(),
        dims: case.dims(),
        spacing: case.sequences[0].spacing,
        sequences: Sequence::ALL.iter().map(|s| s.name().to_string()).collect(),
        has_mask: case.mask.is_some(),
        idh_label: case.idh_label,
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(&dir.join(HEADER_FILE), json.as_bytes())?;
    for s in Sequence::ALL {
        write_file(&dir.join(s.file_name()), &f32s_to_le(&case.sequence(s).data))?;
    }
    let mask_path = dir.join(MASK_FILE);
    match &case.mask {
        Some(m) => write_file(&mask_path, &m.data)?,
        None if mask_path.exists() => fs::remove_file(&mask_path).map_err(|e| Error::write(&mask_path, e))?,
        None => {}
    }
    Ok(())
}

fn read_raw(path: &Path, bundle: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    if bytes.len() != expected {
        return Err(Error::CorruptBundle {
            path: bundle.to_path_buf(),
            reason: format!(
                "{} has {} bytes, expected {expected}",
                path.file_name().unwrap_or_default().to_string_lossy(),
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn read_f32_volume(path: &Path, bundle: &Path, dims: Dims, spacing: [f64; 3]) -> Result<Volume> {
    let bytes = read_raw(path, bundle, 4 * voxel_count(dims))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptBundle {
            path: bundle.to_path_buf(),
            reason: format!("{} contains non-finite values", path.display()),
        });
    }
    Ok(Volume { dims, spacing, data })
}

/// Reads a bundle directory written by [`write_case`].
pub fn load_case(dir: &Path) -> Result<Case> {
    let corrupt = |reason: String| Error::CorruptBundle { path: dir.to_path_buf(), reason };
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::read(&header_path, e))?;
    let header: BundleHeader = serde_json::from_str(&text).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.dims.contains(&0) {
        return Err(corrupt(format!("dims {:?}", header.dims)));
    }
    for s in Sequence::ALL {
        let listed = header.sequences.iter().any(|n| Sequence::parse(n) == Some(s));
        if !listed || !dir.join(s.file_name()).is_file() {
            return Err(Error::MissingSequence { path: dir.to_path_buf(), file: s.file_name() });
        }
    }
    let sequences = Sequence::ALL
        .map(|s| read_f32_volume(&dir.join(s.file_name()), dir, header.dims, header.spacing));
    let [t1, t1c, t2, flair] = sequences;
    let sequences = [t1?, t1c?, t2?, flair?];
    let mask = if header.has_mask {
        let bytes = read_raw(&dir.join(MASK_FILE), dir, voxel_count(header.dims))?;
        Some(LabelVolume::new(header.dims, bytes)?)
    } else {
        None
    };
    if let Some(l) = header.idh_label {
        if l > 1 {
            return Err(Error::InvalidLabel(format!("idh_label {l} in {}", header_path.display())));
        }
    }
    Case::new(header.id, sequences, mask, header.idh_label)
}

/// Writes a single volume as `<name>.raw` plus a `<name>.json` header.
pub fn write_named_volume(dir: &Path, name: &str, v: &Volume) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    let header = serde_json::json!({ "name": name, "dims": v.dims, "spacing": v.spacing, "dtype": "f32le" });
    write_file(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(&header).unwrap().as_bytes())?;
    let raw = dir.join(format!("{name}.raw"));
    write_file(&raw, &f32s_to_le(&v.data))?;
    Ok(raw)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormRegion {
    AllVoxels,
    #[default]
    NonzeroVoxels,
}

/// `(v − μ) / s` with μ and population std `s` taken over `region`; every
/// voxel is mapped. Zero-variance (or empty) regions give all zeros.
pub fn zscore_normalize(v: &Volume, region: NormRegion) -> Volume {
    let in_region = |x: f32| region == NormRegion::AllVoxels || x != 0.0;
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in &v.data {
        if in_region(x) {
            n += 1;
            sum += x as f64;
        }
    }
    let mut out = v.clone();
    if n == 0 {
        out.data.iter_mut().for_each(|x| *x = 0.0);
        return out;
    }
    let mu = sum / n as f64;
    let var = v
        .data
        .iter()
        .filter(|&&x| in_region(x))
        .map(|&x| (x as f64 - mu).powi(2))
        .sum::<f64>()
        / n as f64;
    let s = var.sqrt();
    if s < 1e-8 {
        out.data.iter_mut().for_each(|x| *x = 0.0);
        return out;
    }
    for x in out.data.iter_mut() {
        *x = ((*x as f64 - mu) / s) as f32;
    }
    out
}

/// Z-scores every sequence of `case`.
pub fn normalize_case(case: &Case, region: NormRegion) -> Case {
    let mut out = case.clone();
    for v in out.sequences.iter_mut() {
        *v = zscore_normalize(v, region);
    }
    out
}

fn copy_box<T: Copy>(src: &[T], sdims: Dims, start: [isize; 3], size: Dims, fill: T) -> Vec<T> {
    let mut out = vec![fill; voxel_count(size)];
    for z in 0..size[0] {
        let sz = start[0] + z as isize;
        if sz < 0 || sz >= sdims[0] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = start[1] + y as isize;
            if sy < 0 || sy >= sdims[1] as isize {
                continue;
            }
            for x in 0..size[2] {
                let sx = start[2] + x as isize;
                if sx < 0 || sx >= sdims[2] as isize {
                    continue;
                }
                out[(z * size[1] + y) * size[2] + x] = src[((sz as usize) * sdims[1] + sy as usize) * sdims[2] + sx as usize];
            }
        }
    }
    out
}

/// Start offsets of the crop window along each axis. Negative values mean
/// symmetric zero padding on axes smaller than the requested size.
pub fn crop_window(dims: Dims, size: Dims, centroid: Option<[f64; 3]>) -> [isize; 3] {
    let mut start = [0isize; 3];
    for a in 0..3 {
        let (d, s) = (dims[a] as isize, size[a] as isize);
        start[a] = if d <= s {
            -((s - d) / 2)
        } else {
            match centroid {
                Some(c) => (c[a].round() as isize - s / 2).clamp(0, d - s),
                None => (d - s) / 2,
            }
        };
    }
    start
}

/// Extracts a `size` window centred on the mask centroid (or the volume
/// centre without a tumor), clamped inside the volume; axes smaller than
/// `size` are zero-padded symmetrically.
pub fn crop_fixed(case: &Case, size: Dims) -> Case {
    let dims = case.dims();
    let start = crop_window(dims, size, case.mask.as_ref().and_then(LabelVolume::centroid));
    let sequences = case.sequences.clone().map(|v| Volume {
        dims: size,
        spacing: v.spacing,
        data: copy_box(&v.data, dims, start, size, 0.0),
    });
    let mask = case.mask.as_ref().map(|m| LabelVolume { dims: size, data: copy_box(&m.data, dims, start, size, 0) });
    Case { id: case.id.clone(), sequences, mask, idh_label: case.idh_label }
}

/// Z-scores every sequence, then crops to `size`.
pub fn preprocess(case: &Case, region: NormRegion, size: Dims) -> Case {
    crop_fixed(&normalize_case(case, region), size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "unassigned" | "" => Some(Split::Unassigned),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub case_id: String,
    pub bundle_path: PathBuf,
    pub idh_label: Option<u8>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative bundle paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct RawRow {
    case_id: String,
    bundle_path: String,
    idh_label: String,
    split_tag: String,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.case_id.as_str()) {
                return Err(Error::DuplicateCase(r.case_id.clone()));
            }
        }
        Ok(Self { rows, base_dir: base_dir.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.bundle_path.is_absolute() {
            row.bundle_path.clone()
        } else {
            self.base_dir.join(&row.bundle_path)
        }
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<Case> {
        let mut case = load_case(&self.resolve(row))?;
        if row.idh_label.is_some() {
            case.idh_label = row.idh_label;
        }
        Ok(case)
    }

    pub fn load_all(&self) -> Result<Vec<Case>> {
        self.rows.iter().map(|r| self.load_row(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(RawRow {
                case_id: r.case_id.clone(),
                bundle_path: r.bundle_path.to_string_lossy().into_owned(),
                idh_label: r.idh_label.map(|l| l.to_string()).unwrap_or_default(),
                split_tag: r.split.as_str().into(),
            })
            .expect("in-memory csv");
        }
        if self.rows.is_empty() {
            return "case_id,bundle_path,idh_label,split_tag\n".into();
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

fn parse_label(s: &str, case_id: &str) -> Result<Option<u8>> {
    match s.trim() {
        "" | "null" | "NA" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::InvalidLabel(format!("case {case_id}: idh_label {other:?}"))),
    }
}

/// Parses a `case_id,bundle_path,idh_label,split_tag` CSV with header row.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.deserialize::<RawRow>() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let idh_label = parse_label(&rec.idh_label, &rec.case_id)?;
        let split = Split::parse(&rec.split_tag)
            .ok_or_else(|| Error::Data(format!("case {}: split_tag {:?}", rec.case_id, rec.split_tag)))?;
        rows.push(ManifestRow { case_id: rec.case_id, bundle_path: PathBuf::from(rec.bundle_path), idh_label, split });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(rows, base)
}
