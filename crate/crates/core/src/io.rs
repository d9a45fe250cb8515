//! Image files, rating manifests, parameter files and provenance.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Grid2;
use crate::trainer::{DatasetRecord, Polarity};
use crate::zoo::{ModelKind, ModelSpec, CNN_MIN_INPUT};
use crate::TOOL_VERSION;

pub const GAMMA_NOTE: &str =
    "normalized luminance in [0,1]; display calibration 5-300 cd/m^2, gamma 2.4 (metadata only)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFormat {
    Pgm8,
    Pgm16,
    RawF32,
}

impl ImageFormat {
    /// `.f32`/`.raw` are RAW-F32, anything else 8-bit PGM.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32") | Some("raw") => ImageFormat::RawF32,
            _ => ImageFormat::Pgm8,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Binary PGM (P5) with maxval 255 or 65535, mapped to `v / maxval`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Grid2> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(path, 0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, pos, format!("expected header field {}", k + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| parse_err(path, start, format!("header value {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(path, pos, "expected a single whitespace after maxval"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(parse_err(path, 3, "zero image dimension"));
    }
    let bpp = match maxval {
        255 => 1,
        65535 => 2,
        _ => return Err(parse_err(path, pos - 1, format!("unsupported maxval {maxval}"))),
    };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bpp))
        .ok_or_else(|| parse_err(path, 3, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let scale = maxval as f64;
    let data = if bpp == 1 {
        payload[..need].iter().map(|v| *v as f64 / scale).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Grid2::from_vec(height, width, data)
}

/// Clip to `[0,1]`, scale by `maxval` and round half to even.
pub fn encode_pgm(grid: &Grid2, maxval: u16) -> Result<Vec<u8>> {
    if grid.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InputDomain("cannot save a non-finite image".into()));
    }
    let (h, w) = grid.dims();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for v in grid.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round_ties_even() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

/// Sidecar describing a RAW-F32 payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub order: String,
    pub endianness: String,
    #[serde(default)]
    pub gamma_note: String,
    /// Pixels outside `[0,1]`, when the payload is a rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped_pixels: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn save_raw(grid: &Grid2, path: &Path, clipped: Option<usize>) -> Result<()> {
    if grid.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InputDomain("cannot save a non-finite image".into()));
    }
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    write(path, &bytes)?;
    let side = RawSidecar {
        height: grid.height(),
        width: grid.width(),
        channels: 1,
        order: "row-major".into(),
        endianness: "little".into(),
        gamma_note: GAMMA_NOTE.into(),
        clipped_pixels: clipped,
    };
    write_json(&sidecar_path(path), &side)
}

fn load_raw(path: &Path) -> Result<Grid2> {
    let side_path = sidecar_path(path);
    let side: RawSidecar = read_json(&side_path)?;
    if side.channels != 1 || side.order != "row-major" || side.endianness != "little" {
        return Err(parse_err(&side_path, 0, "only single-channel row-major little-endian data"));
    }
    let bytes = read(path)?;
    let need = side.height * side.width * 4;
    if bytes.len() != need {
        return Err(parse_err(
            path,
            bytes.len().min(need),
            format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Grid2::from_vec(side.height, side.width, data)
}

pub fn load_image(path: &Path) -> Result<Grid2> {
    match ImageFormat::from_path(path) {
        ImageFormat::RawF32 => load_raw(path),
        _ => parse_pgm(&read(path)?, path),
    }
}

/// RAW-F32 stores single precision, so values round to the nearest `f32`.
pub fn save_image(grid: &Grid2, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Pgm8 => write(path, &encode_pgm(grid, 255)?),
        ImageFormat::Pgm16 => write(path, &encode_pgm(grid, 65535)?),
        ImageFormat::RawF32 => save_raw(grid, path, None),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let offset = bytes
            .split_inclusive(|b| *b == b'\n')
            .take(e.line().saturating_sub(1))
            .map(<[u8]>::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        parse_err(path, offset, e.to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
}

/// SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Provenance {
    pub fn new<T: Serialize + ?Sized>(seed: u64, config: &T) -> Result<Self> {
        Ok(Self {
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash(config)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frozen {
    pub bn_divisors: Vec<f64>,
}

/// On-disk model parameters; `theta` is in the unconstrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub model_type: ModelKind,
    pub version: String,
    pub theta: Vec<f64>,
    pub frozen: Frozen,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ParamsFile {
    pub fn from_spec(spec: &ModelSpec, provenance: Option<Provenance>) -> Self {
        Self {
            model_type: spec.kind,
            version: TOOL_VERSION.to_string(),
            theta: spec.theta.clone(),
            frozen: Frozen {
                bn_divisors: spec.bn_divisors.clone(),
            },
            provenance,
        }
    }

    pub fn into_spec(self) -> Result<ModelSpec> {
        if self.theta.iter().chain(&self.frozen.bn_divisors).any(|v| !v.is_finite()) {
            return Err(Error::InputDomain("non-finite parameter".into()));
        }
        let spec = ModelSpec {
            kind: self.model_type,
            theta: self.theta,
            bn_divisors: self.frozen.bn_divisors,
        };
        spec.build(CNN_MIN_INPUT, CNN_MIN_INPUT)?;
        Ok(spec)
    }
}

pub fn save_params(spec: &ModelSpec, path: &Path, provenance: Option<Provenance>) -> Result<()> {
    write_json(path, &ParamsFile::from_spec(spec, provenance))
}

pub fn load_params(path: &Path) -> Result<ModelSpec> {
    read_json::<ParamsFile>(path)?.into_spec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// 1-based line number in the manifest file.
    pub line: usize,
    pub reference: PathBuf,
    pub distorted: PathBuf,
    pub score: f64,
}

/// CSV of `ref,dist,score` rows. A `#polarity=quality|distortion` comment
/// sets the score direction; other `#` lines and an optional header row are
/// skipped. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub polarity: Polarity,
    pub rows: Vec<ManifestRow>,
}

fn manifest_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut polarity = Polarity::default();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else { continue };
        if let Some(v) = rest.trim().strip_prefix("polarity=") {
            polarity = match v.trim() {
                "quality" => Polarity::Quality,
                "distortion" => Polarity::Distortion,
                other => return Err(manifest_err(path, i + 1, format!("unknown polarity {other:?}"))),
            };
        }
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, text_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = text_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(trimmed.as_bytes())
            .records()
            .next()
            .expect("non-empty line")
            .map_err(|e| manifest_err(path, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(manifest_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        if rows.is_empty() && &rec[0] == "ref" && &rec[1] == "dist" && &rec[2] == "score" {
            continue;
        }
        let score: f64 = rec[2]
            .parse()
            .map_err(|_| manifest_err(path, line, format!("score {:?} is not a number", &rec[2])))?;
        if !score.is_finite() {
            return Err(manifest_err(path, line, "non-finite score"));
        }
        if !seen.insert((rec[0].to_string(), rec[1].to_string())) {
            return Err(manifest_err(path, line, format!("duplicate pair ({}, {})", &rec[0], &rec[1])));
        }
        rows.push(ManifestRow {
            line,
            reference: PathBuf::from(&rec[0]),
            distorted: PathBuf::from(&rec[1]),
            score,
        });
    }
    if rows.is_empty() {
        return Err(manifest_err(path, 0, "no rows"));
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        polarity,
        rows,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| parse_err(path, e.valid_up_to(), "manifest is not UTF-8"))?;
    parse_manifest(text, path)
}

impl Manifest {
    fn resolve(&self, p: &Path) -> PathBuf {
        match self.path.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Load every image pair; scores are mapped to the distortion-increasing
    /// convention.
    pub fn load_records(&self) -> Result<Vec<DatasetRecord>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(DatasetRecord {
                    reference: load_image(&self.resolve(&r.reference))?,
                    distorted: load_image(&self.resolve(&r.distorted))?,
                    score: self.polarity.canonical(r.score),
                })
            })
            .collect()
    }
}

pub fn write_manifest(path: &Path, polarity: Polarity, rows: &[(String, String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["ref", "dist", "score"]).map_err(io_err)?;
    for (a, b, s) in rows {
        w.write_record([a.as_str(), b.as_str(), &format!("{s:?}")]).map_err(io_err)?;
    }
    let body = w.into_inner().map_err(|e| io_err(e.into_error().into()))?;
    let tag = match polarity {
        Polarity::Quality => "quality",
        Polarity::Distortion => "distortion",
    };
    let mut out = format!("#polarity={tag}\n").into_bytes();
    out.extend_from_slice(&body);
    write(path, &out)
}

pub fn count_clipped(grid: &Grid2) -> usize {
    grid.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rendering {
    /// Presentation PGM (clipped) and the unclipped RAW-F32.
    pub files: Vec<PathBuf>,
    pub clipped_pixels: usize,
}

fn check_unit(e: &Grid2) -> Result<()> {
    let n = e.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InputDomain(format!("distortion direction must be unit norm, got {n}")));
    }
    Ok(())
}

/// Write `x + α ê` as `<stem>.pgm` (clipped) and `<stem>.f32` (unclipped,
/// with its sidecar carrying the clip count).
pub fn render_distorted(x: &Grid2, e: &Grid2, alpha: f64, stem: &Path) -> Result<Rendering> {
    check_unit(e)?;
    if !x.same_dims(e) {
        return Err(Error::Shape(format!("image {:?} vs direction {:?}", x.dims(), e.dims())));
    }
    let y = x.add_scaled(alpha, e);
    let clipped = count_clipped(&y);
    let pgm = stem.with_extension("pgm");
    let raw = stem.with_extension("f32");
    save_image(&y, &pgm, ImageFormat::Pgm8)?;
    save_raw(&y, &raw, Some(clipped))?;
    Ok(Rendering {
        files: vec![pgm, raw],
        clipped_pixels: clipped,
    })
}

pub const GALLERY_ALPHA_MAX: f64 = 4.0;
pub const GALLERY_ALPHA_MIN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gallery {
    /// Isolated, superimposed and raw renderings for `ê_max` then `ê_min`.
    pub files: Vec<PathBuf>,
    pub sidecars: Vec<PathBuf>,
    /// Out-of-range pixels of `x + α ê` for `ê_max` and `ê_min`.
    pub clipped_pixels: [usize; 2],
}

/// Six renderings per image: for `4·ê_max` and `30·ê_min`, the distortion
/// alone on mid-gray, superimposed on `x`, and the unclipped RAW-F32.
pub fn render_gallery(x: &Grid2, e_max: &Grid2, e_min: &Grid2, dir: &Path, image_id: &str) -> Result<Gallery> {
    let mut files = Vec::new();
    let mut sidecars = Vec::new();
    let mut clipped = [0; 2];
    for (k, (tag, e, alpha)) in [("max", e_max, GALLERY_ALPHA_MAX), ("min", e_min, GALLERY_ALPHA_MIN)]
        .into_iter()
        .enumerate()
    {
        check_unit(e)?;
        let isolated = Grid2::filled(e.height(), e.width(), 0.5).add_scaled(alpha, e);
        let p = dir.join(format!("{image_id}_{tag}_isolated.pgm"));
        save_image(&isolated, &p, ImageFormat::Pgm8)?;
        files.push(p);
        let stem = dir.join(format!("{image_id}_{tag}_superimposed"));
        let r = render_distorted(x, e, alpha, &stem)?;
        let raw = dir.join(format!("{image_id}_{tag}_raw.f32"));
        fs::rename(&r.files[1], &raw).map_err(|err| Error::io(&raw, err))?;
        fs::rename(sidecar_path(&r.files[1]), sidecar_path(&raw)).map_err(|err| Error::io(&raw, err))?;
        files.push(r.files[0].clone());
        files.push(raw.clone());
        sidecars.push(sidecar_path(&raw));
        clipped[k] = r.clipped_pixels;
    }
    Ok(Gallery {
        files,
        sidecars,
        clipped_pixels: clipped,
    })
}
