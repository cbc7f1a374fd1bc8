//! CSV and JSON file formats.
//!
//! Every CSV has a header line, `,` separators and `\n` line endings. Real
//! numbers are written with 17 significant digits (`{:.16e}`) so that a file
//! round trip is exact and reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::align::UpToScalePose;
use crate::error::{Error, Result};
use crate::global::{enu_to_lla, lla_to_enu, Geodetic, GlobalNode, GpsFix};
use crate::preint::ImuSample;
use crate::quat::{UnitQuat, Vec3};
use crate::sim::{Dataset, SimConfig};
use crate::state::{Extrinsics, FrameState};
use crate::window::{EstimatorInput, FeatureMeasurement, FrameInput, TrajectoryPoint};

pub const IMU_FILE: &str = "imu.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const SFM_FILE: &str = "sfm_poses.csv";
pub const EXTRINSICS_FILE: &str = "extrinsics.json";
pub const GPS_FILE: &str = "gps.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";
pub const MANIFEST_FILE: &str = "sim_manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ALIGNMENT_FILE: &str = "alignment.json";
pub const GLOBAL_TRAJECTORY_FILE: &str = "global_trajectory.csv";
pub const TRANSFORM_FILE: &str = "transform.json";

pub const IMU_HEADER: &[&str] = &["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const FEATURES_HEADER: &[&str] = &["t", "frame_id", "feature_id", "u", "v"];
pub const SFM_HEADER: &[&str] = &["frame_id", "t", "qw", "qx", "qy", "qz", "px", "py", "pz"];
pub const GPS_ENU_HEADER: &[&str] = &["t", "px", "py", "pz", "std_x", "std_y", "std_z"];
pub const GPS_LLA_HEADER: &[&str] = &["t", "lat", "lon", "alt", "std_x", "std_y", "std_z"];
pub const GROUNDTRUTH_HEADER: &[&str] = &["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];
pub const TRAJECTORY_HEADER: &[&str] = &[
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "bax", "bay", "baz", "bgx", "bgy", "bgz",
];
pub const GLOBAL_TRAJECTORY_HEADER: &[&str] = &["t", "px", "py", "pz", "qw", "qx", "qy", "qz"];

/// Fixed 17-significant-digit form of a real number.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

struct CsvOut {
    writer: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl CsvOut {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path)?;
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file));
        writer.write_record(header).map_err(|e| Error::parse(name_of(path), e))?;
        Ok(Self { writer, path: path.to_path_buf() })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields).map_err(|e| Error::parse(name_of(&self.path), e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn reals(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| num(*v)).collect()
}

/// Reads a CSV whose header must be one of `headers`; returns the index of
/// the matching header and the rows as strings.
fn read_rows(path: &Path, headers: &[&[&str]]) -> Result<(usize, Vec<csv::StringRecord>)> {
    let file = File::open(path).map_err(|e| Error::parse(name_of(path), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = reader.headers().map_err(|e| Error::parse(name_of(path), e))?.iter().map(str::to_string).collect();
    let which = headers.iter().position(|h| h.len() == found.len() && h.iter().zip(&found).all(|(a, b)| a == b)).ok_or_else(|| {
        Error::parse(
            name_of(path),
            format!(
                "header `{}` does not match {}",
                found.join(","),
                headers.iter().map(|h| format!("`{}`", h.join(","))).collect::<Vec<_>>().join(" or ")
            ),
        )
    })?;
    let rows = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(name_of(path), e))?;
    Ok((which, rows))
}

fn field<T: std::str::FromStr>(path: &Path, row: &csv::StringRecord, k: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let line = row.position().map_or(0, |p| p.line());
    let raw = row.get(k).ok_or_else(|| Error::parse(name_of(path), format!("line {line}: missing column {k}")))?;
    raw.parse::<T>().map_err(|e| Error::parse(name_of(path), format!("line {line}: column {k} `{raw}`: {e}")))
}

fn finite(path: &Path, row: &csv::StringRecord, k: usize) -> Result<f64> {
    let v: f64 = field(path, row, k)?;
    if !v.is_finite() {
        let line = row.position().map_or(0, |p| p.line());
        return Err(Error::parse(name_of(path), format!("line {line}: non-finite value in column {k}")));
    }
    Ok(v)
}

fn vec3(path: &Path, row: &csv::StringRecord, k: usize) -> Result<Vec3> {
    Ok(Vec3::new(finite(path, row, k)?, finite(path, row, k + 1)?, finite(path, row, k + 2)?))
}

fn quat(path: &Path, row: &csv::StringRecord, k: usize) -> Result<UnitQuat> {
    let c = [finite(path, row, k)?, finite(path, row, k + 1)?, finite(path, row, k + 2)?, finite(path, row, k + 3)?];
    UnitQuat::new_checked(c[0], c[1], c[2], c[3]).map_err(|e| Error::parse(name_of(path), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(name_of(path), e))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::parse(name_of(path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(name_of(path), e))
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = CsvOut::create(path, IMU_HEADER)?;
    for s in samples {
        out.row(&reals(&[s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]))?;
    }
    out.finish()
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let (_, rows) = read_rows(path, &[IMU_HEADER])?;
    let samples = rows
        .iter()
        .map(|r| Ok(ImuSample::new(finite(path, r, 0)?, vec3(path, r, 1)?, vec3(path, r, 4)?)))
        .collect::<Result<Vec<_>>>()?;
    if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::parse(name_of(path), "timestamps must strictly increase"));
    }
    Ok(samples)
}

/// Feature measurements of one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub id: usize,
    pub t: f64,
    pub features: Vec<FeatureMeasurement>,
}

pub fn write_features(path: &Path, frames: &[FrameFeatures]) -> Result<()> {
    let mut out = CsvOut::create(path, FEATURES_HEADER)?;
    for f in frames {
        for m in &f.features {
            out.row(&[num(f.t), f.id.to_string(), m.feature_id.to_string(), num(m.u), num(m.v)])?;
        }
    }
    out.finish()
}

/// Groups rows by frame id; frames come out in id order.
pub fn read_features(path: &Path) -> Result<Vec<FrameFeatures>> {
    let (_, rows) = read_rows(path, &[FEATURES_HEADER])?;
    let mut frames: BTreeMap<usize, FrameFeatures> = BTreeMap::new();
    for r in &rows {
        let t = finite(path, r, 0)?;
        let id: usize = field(path, r, 1)?;
        let m = FeatureMeasurement { feature_id: field(path, r, 2)?, u: finite(path, r, 3)?, v: finite(path, r, 4)? };
        let entry = frames.entry(id).or_insert_with(|| FrameFeatures { id, t, features: Vec::new() });
        if entry.t != t {
            return Err(Error::parse(name_of(path), format!("frame {id} has two timestamps ({} and {t})", entry.t)));
        }
        entry.features.push(m);
    }
    let frames: Vec<FrameFeatures> = frames.into_values().collect();
    if frames.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::parse(name_of(path), "frame timestamps must increase with frame id"));
    }
    Ok(frames)
}

pub fn write_sfm(path: &Path, poses: &[UpToScalePose]) -> Result<()> {
    let mut out = CsvOut::create(path, SFM_HEADER)?;
    for p in poses {
        let q = p.q.to_array();
        let mut row = vec![p.frame_id.to_string()];
        row.extend(reals(&[p.t, q[0], q[1], q[2], q[3], p.p.x, p.p.y, p.p.z]));
        out.row(&row)?;
    }
    out.finish()
}

pub fn read_sfm(path: &Path) -> Result<Vec<UpToScalePose>> {
    let (_, rows) = read_rows(path, &[SFM_HEADER])?;
    rows.iter()
        .map(|r| Ok(UpToScalePose { frame_id: field(path, r, 0)?, t: finite(path, r, 1)?, q: quat(path, r, 2)?, p: vec3(path, r, 6)? }))
        .collect()
}

pub fn write_extrinsics(path: &Path, ext: &Extrinsics) -> Result<()> {
    write_json(path, ext)
}

pub fn read_extrinsics(path: &Path) -> Result<Extrinsics> {
    read_json(path)
}

/// Column layout of `gps.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GpsFormat {
    /// Decided by the header.
    #[default]
    Auto,
    Enu,
    Lla,
}

pub fn write_gps(path: &Path, fixes: &[GpsFix], origin: Option<&Geodetic>) -> Result<()> {
    let mut out = CsvOut::create(path, if origin.is_some() { GPS_LLA_HEADER } else { GPS_ENU_HEADER })?;
    for f in fixes {
        let p = match origin {
            Some(o) => {
                let g = enu_to_lla(&f.position, o);
                Vec3::new(g.lat, g.lon, g.alt)
            }
            None => f.position,
        };
        out.row(&reals(&[f.t, p.x, p.y, p.z, f.std.x, f.std.y, f.std.z]))?;
    }
    out.finish()
}

/// GPS fixes in ENU. Geodetic files are converted around their first fix,
/// which is returned as the origin.
pub fn read_gps(path: &Path, format: GpsFormat) -> Result<(Vec<GpsFix>, Option<Geodetic>)> {
    let headers: &[&[&str]] = match format {
        GpsFormat::Auto => &[GPS_ENU_HEADER, GPS_LLA_HEADER],
        GpsFormat::Enu => &[GPS_ENU_HEADER],
        GpsFormat::Lla => &[GPS_LLA_HEADER],
    };
    let (which, rows) = read_rows(path, headers)?;
    let geodetic = headers[which] == GPS_LLA_HEADER;
    let mut fixes = Vec::with_capacity(rows.len());
    let mut origin = None;
    for r in &rows {
        let t = finite(path, r, 0)?;
        let c = vec3(path, r, 1)?;
        let std = vec3(path, r, 4)?;
        if !std.iter().all(|s| *s > 0.0) {
            return Err(Error::parse(name_of(path), format!("fix at t = {t} has non-positive std")));
        }
        let position = if geodetic {
            let g = Geodetic { lat: c.x, lon: c.y, alt: c.z };
            let o = *origin.get_or_insert(g);
            lla_to_enu(&g, &o)
        } else {
            c
        };
        fixes.push(GpsFix { t, position, std });
    }
    Ok((fixes, origin))
}

/// Ground-truth row: time, position, attitude and velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRow {
    pub t: f64,
    pub p: Vec3,
    pub q: UnitQuat,
    pub v: Vec3,
}

pub fn write_groundtruth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut out = CsvOut::create(path, GROUNDTRUTH_HEADER)?;
    for r in rows {
        let q = r.q.to_array();
        out.row(&reals(&[r.t, r.p.x, r.p.y, r.p.z, q[0], q[1], q[2], q[3], r.v.x, r.v.y, r.v.z]))?;
    }
    out.finish()
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<TruthRow>> {
    let (_, rows) = read_rows(path, &[GROUNDTRUTH_HEADER])?;
    rows.iter()
        .map(|r| Ok(TruthRow { t: finite(path, r, 0)?, p: vec3(path, r, 1)?, q: quat(path, r, 4)?, v: vec3(path, r, 8)? }))
        .collect()
}

pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut out = CsvOut::create(path, TRAJECTORY_HEADER)?;
    for pt in points {
        let s = &pt.state;
        let q = s.q.to_array();
        out.row(&reals(&[
            pt.t, s.p.x, s.p.y, s.p.z, q[0], q[1], q[2], q[3], s.v.x, s.v.y, s.v.z, s.ba.x, s.ba.y, s.ba.z, s.bg.x, s.bg.y, s.bg.z,
        ]))?;
    }
    out.finish()
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, FrameState)>> {
    let (_, rows) = read_rows(path, &[TRAJECTORY_HEADER])?;
    let out = rows
        .iter()
        .map(|r| {
            Ok((
                finite(path, r, 0)?,
                FrameState { p: vec3(path, r, 1)?, q: quat(path, r, 4)?, v: vec3(path, r, 8)?, ba: vec3(path, r, 11)?, bg: vec3(path, r, 14)? },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    if out.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::parse(name_of(path), "timestamps must strictly increase"));
    }
    Ok(out)
}

pub fn write_global_trajectory(path: &Path, nodes: &[GlobalNode]) -> Result<()> {
    let mut out = CsvOut::create(path, GLOBAL_TRAJECTORY_HEADER)?;
    for n in nodes {
        let q = n.q.to_array();
        out.row(&reals(&[n.t, n.p.x, n.p.y, n.p.z, q[0], q[1], q[2], q[3]]))?;
    }
    out.finish()
}

pub fn read_global_trajectory(path: &Path) -> Result<Vec<GlobalNode>> {
    let (_, rows) = read_rows(path, &[GLOBAL_TRAJECTORY_HEADER])?;
    rows.iter().map(|r| Ok(GlobalNode { t: finite(path, r, 0)?, p: vec3(path, r, 1)?, q: quat(path, r, 4)? })).collect()
}

/// Local-to-ENU transform as written to `transform.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformFile {
    #[serde(rename = "q_l_G")]
    pub rotation: UnitQuat,
    #[serde(rename = "p_l_G")]
    pub translation: Vec3,
    pub strategy: crate::global::TransformStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<String>,
    pub frames: usize,
    pub imu_samples: usize,
    pub gps_fixes: usize,
    pub path_length: f64,
    pub config: SimConfig,
}

/// Writes the full simulated dataset into `dir` and returns the file names.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    write_imu(&dir.join(IMU_FILE), &data.imu)?;
    let frames: Vec<FrameFeatures> = data
        .frames
        .iter()
        .map(|f| FrameFeatures {
            id: f.id,
            t: f.t,
            features: f.observations.iter().map(|o| FeatureMeasurement { feature_id: o.feature_id, u: o.u, v: o.v }).collect(),
        })
        .collect();
    write_features(&dir.join(FEATURES_FILE), &frames)?;
    write_sfm(&dir.join(SFM_FILE), &data.sfm)?;
    write_extrinsics(&dir.join(EXTRINSICS_FILE), &data.config.extrinsics)?;
    write_gps(&dir.join(GPS_FILE), &data.gps, data.config.gps_origin.as_ref())?;
    let truth: Vec<TruthRow> =
        data.truth.iter().map(|s| TruthRow { t: s.t, p: s.state.p, q: s.state.q, v: s.state.v }).collect();
    write_groundtruth(&dir.join(GROUNDTRUTH_FILE), &truth)?;
    let mut files: Vec<String> =
        [IMU_FILE, FEATURES_FILE, SFM_FILE, EXTRINSICS_FILE, GPS_FILE, GROUNDTRUTH_FILE].iter().map(|s| s.to_string()).collect();
    let manifest = Manifest {
        seed: data.config.seed,
        files: files.clone(),
        frames: data.frames.len(),
        imu_samples: data.imu.len(),
        gps_fixes: data.gps.len(),
        path_length: data.path_length(),
        config: data.config.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    files.push(MANIFEST_FILE.to_string());
    Ok(files)
}

/// Estimator input assembled from a dataset directory.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub input: EstimatorInput,
    pub extrinsics: Extrinsics,
    /// Present when the directory holds `groundtruth.csv`.
    pub truth: Option<Vec<TruthRow>>,
}

fn nearest_row(rows: &[TruthRow], t: f64) -> Option<&TruthRow> {
    let i = rows.partition_point(|r| r.t < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|k| rows.get(k))
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .filter(|r| (r.t - t).abs() < 1e-6)
}

/// Reads `imu.csv`, `features.csv`, `extrinsics.json` and, when present,
/// `sfm_poses.csv` and `groundtruth.csv`. Frames listed only in the SfM file
/// (no tracked features) are kept. Ground-truth states carry the supplied
/// biases since the file has none.
pub fn load_run(dir: &Path, truth_ba: Vec3, truth_bg: Vec3) -> Result<LoadedRun> {
    let imu = read_imu(&dir.join(IMU_FILE))?;
    let features = read_features(&dir.join(FEATURES_FILE))?;
    let extrinsics = read_extrinsics(&dir.join(EXTRINSICS_FILE))?;
    let sfm_path = dir.join(SFM_FILE);
    let sfm = if sfm_path.exists() { read_sfm(&sfm_path)? } else { Vec::new() };
    let truth_path = dir.join(GROUNDTRUTH_FILE);
    let truth = if truth_path.exists() { Some(read_groundtruth(&truth_path)?) } else { None };

    let mut frames: BTreeMap<usize, FrameInput> = features
        .into_iter()
        .map(|f| (f.id, FrameInput { id: f.id, t: f.t, features: f.features, sfm: None, truth: None }))
        .collect();
    for s in sfm {
        let frame = frames
            .entry(s.frame_id)
            .or_insert_with(|| FrameInput { id: s.frame_id, t: s.t, features: Vec::new(), sfm: None, truth: None });
        if (frame.t - s.t).abs() > 1e-9 {
            return Err(Error::parse(SFM_FILE, format!("frame {} time {} disagrees with features ({})", s.frame_id, s.t, frame.t)));
        }
        frame.sfm = Some(s);
    }
    if let Some(rows) = &truth {
        for f in frames.values_mut() {
            f.truth = nearest_row(rows, f.t).map(|r| FrameState { p: r.p, q: r.q, v: r.v, ba: truth_ba, bg: truth_bg });
        }
    }
    let frames: Vec<FrameInput> = frames.into_values().collect();
    if frames.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::parse(FEATURES_FILE, "frame timestamps must increase with frame id"));
    }
    Ok(LoadedRun { input: EstimatorInput { imu, frames }, extrinsics, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, TrajectorySpec};

    fn small() -> Dataset {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 2.0, ..Default::default() }, ..Default::default() };
        simulate(&cfg).unwrap()
    }

    #[test]
    fn number_format_is_fixed_width_and_exact() {
        assert_eq!(num(1.0), "1.0000000000000000e0");
        assert_eq!(num(-0.1), "-1.0000000000000001e-1");
        for x in [std::f64::consts::PI, 1e-300, -123456.789, 0.1 + 0.2] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(dir.path(), &d).unwrap();
        assert_eq!(files.len(), 7);
        let imu = read_imu(&dir.path().join(IMU_FILE)).unwrap();
        assert_eq!(imu, d.imu);
        let feats = read_features(&dir.path().join(FEATURES_FILE)).unwrap();
        assert_eq!(feats.len(), d.frames.len());
        for (f, g) in feats.iter().zip(&d.frames) {
            assert_eq!((f.id, f.t, f.features.len()), (g.id, g.t, g.observations.len()));
            assert_eq!(f.features[0].u, g.observations[0].u);
        }
        assert_eq!(read_sfm(&dir.path().join(SFM_FILE)).unwrap(), d.sfm);
        assert_eq!(read_extrinsics(&dir.path().join(EXTRINSICS_FILE)).unwrap(), d.config.extrinsics);
        let (gps, origin) = read_gps(&dir.path().join(GPS_FILE), GpsFormat::Auto).unwrap();
        assert!(origin.is_none());
        assert_eq!(gps, d.gps);
        let truth = read_groundtruth(&dir.path().join(GROUNDTRUTH_FILE)).unwrap();
        assert_eq!(truth.len(), d.truth.len());
        assert_eq!(truth[17].p, d.truth[17].state.p);
        let m: Manifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.config, d.config);
    }

    #[test]
    fn loaded_run_matches_in_memory_input() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let ba = d.truth[0].state.ba;
        let bg = d.truth[0].state.bg;
        let run = load_run(dir.path(), ba, bg).unwrap();
        let direct = EstimatorInput::from_dataset(&d);
        assert_eq!(run.input.imu, direct.imu);
        assert_eq!(run.input.frames.len(), direct.frames.len());
        for (a, b) in run.input.frames.iter().zip(&direct.frames) {
            assert_eq!((a.id, a.t, &a.features, a.sfm), (b.id, b.t, &b.features, b.sfm));
            let (ta, tb) = (a.truth.unwrap(), b.truth.unwrap());
            assert_eq!((ta.p, ta.q, ta.v), (tb.p, tb.q, tb.v));
            assert_eq!((ta.ba, ta.bg), (ba, bg));
        }
        assert_eq!(run.extrinsics, d.config.extrinsics);
        assert_eq!(run.truth.unwrap().len(), d.truth.len());

        std::fs::remove_file(dir.path().join(IMU_FILE)).unwrap();
        assert!(matches!(load_run(dir.path(), ba, bg), Err(Error::Io(_) | Error::Parse { .. })));
    }

    #[test]
    fn text_layout() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_imu(&dir.path().join(IMU_FILE), &d.imu[..2]).unwrap();
        let text = std::fs::read_to_string(dir.path().join(IMU_FILE)).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "t,wx,wy,wz,ax,ay,az");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "");
        assert!(!text.contains('\r'));
        write_extrinsics(&dir.path().join(EXTRINSICS_FILE), &d.config.extrinsics).unwrap();
        let v: serde_json::Value = read_json(&dir.path().join(EXTRINSICS_FILE)).unwrap();
        assert_eq!(v["q_c_b"].as_array().unwrap().len(), 4);
        assert_eq!(v["p_c_b"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn geodetic_gps_round_trip() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { duration: 3.0, ..Default::default() },
            gps_origin: Some(Geodetic { lat: 47.4, lon: 8.5, alt: 400.0 }),
            ..Default::default()
        };
        let d = simulate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(GPS_FILE);
        write_gps(&path, &d.gps, cfg.gps_origin.as_ref()).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("t,lat,lon,alt,"));
        let (fixes, origin) = read_gps(&path, GpsFormat::Auto).unwrap();
        assert!(origin.is_some());
        assert!(read_gps(&path, GpsFormat::Enu).is_err());
        // positions come back relative to the first fix
        for (a, b) in fixes.iter().zip(&d.gps) {
            assert!(((a.position - fixes[0].position) - (b.position - d.gps[0].position)).amax() < 1e-4);
            assert!((a.position - (b.position - d.gps[0].position)).amax() < 1e-4);
        }
    }

    #[test]
    fn malformed_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imu.csv");
        std::fs::write(&p, "t,wx,wy\n0,0,0\n").unwrap();
        assert!(matches!(read_imu(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,x\n").unwrap();
        assert!(matches!(read_imu(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "t,wx,wy,wz,ax,ay,az\n1,0,0,0,0,0,0\n0,0,0,0,0,0,0\n").unwrap();
        assert!(matches!(read_imu(&p), Err(Error::Parse { .. })));
        assert!(matches!(read_imu(&dir.path().join("missing.csv")), Err(Error::Parse { .. })));
        let g = dir.path().join("gps.csv");
        std::fs::write(&g, "t,px,py,pz,std_x,std_y,std_z\n0,0,0,0,0,1,1\n").unwrap();
        assert!(read_gps(&g, GpsFormat::Auto).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let d = small();
        let pts: Vec<TrajectoryPoint> =
            d.frames.iter().map(|f| TrajectoryPoint { frame_id: f.id, t: f.t, state: *d.frame_truth(f) }).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(TRAJECTORY_FILE);
        write_trajectory(&p, &pts).unwrap();
        let back = read_trajectory(&p).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            assert_eq!(a.0, b.t);
            assert_eq!(a.1, b.state);
        }
    }
}
