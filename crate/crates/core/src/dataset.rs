//! Problem instances: the native text format, BAL import, synthetic scenes and
//! the perturbation / outlier generators used by the experiments.
//!
//! Native format (version 1), one record per line, `#` starts a comment:
//!
//! ```text
//! gbp-ba-problem 1
//! intrinsics <fx> <fy> <cx> <cy>
//! meta <key> <value...>                       (zero or more)
//! keyframes <N>
//! <id> <rx> <ry> <rz> <tx> <ty> <tz> [gt <rx> <ry> <rz> <tx> <ty> <tz>]
//! landmarks <M>
//! <id> <x> <y> <z> [gt <x> <y> <z>]
//! measurements <K>
//! <keyframe> <landmark> <u> <v> <sigma> [outlier]
//! end
//! ```
//!
//! Poses are world-to-camera (`p = R·l + t`) with angle-axis rotations. Floats
//! are written with 17 significant digits so a save/load cycle is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{project, Intrinsics, Pose};

pub const FORMAT_MAGIC: &str = "gbp-ba-problem";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("problem has no ground truth for {0}")]
    MissingGroundTruth(String),
    #[error("degenerate generator parameters: {0}")]
    Degenerate(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSpec {
    pub id: usize,
    pub pose: Pose,
    pub ground_truth: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSpec {
    pub id: usize,
    pub position: Vector3<f64>,
    pub ground_truth: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec {
    pub keyframe: usize,
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    /// Isotropic pixel standard deviation.
    pub sigma: f64,
    /// Ground-truth outlier label.
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub intrinsics: Intrinsics,
    pub keyframes: Vec<KeyframeSpec>,
    pub landmarks: Vec<LandmarkSpec>,
    pub measurements: Vec<MeasurementSpec>,
    pub metadata: BTreeMap<String, String>,
}

impl ProblemSpec {
    pub fn new(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            keyframes: Vec::new(),
            landmarks: Vec::new(),
            measurements: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Ids must equal their index; every measurement must resolve.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, kf) in self.keyframes.iter().enumerate() {
            if kf.id != i {
                return Err(DatasetError::Invalid(format!(
                    "keyframe at index {i} has id {}",
                    kf.id
                )));
            }
        }
        for (i, lm) in self.landmarks.iter().enumerate() {
            if lm.id != i {
                return Err(DatasetError::Invalid(format!(
                    "landmark at index {i} has id {}",
                    lm.id
                )));
            }
        }
        for (i, m) in self.measurements.iter().enumerate() {
            if m.keyframe >= self.keyframes.len() || m.landmark >= self.landmarks.len() {
                return Err(DatasetError::Invalid(format!(
                    "measurement {i} references keyframe {} / landmark {}",
                    m.keyframe, m.landmark
                )));
            }
            if !(m.sigma > 0.0) {
                return Err(DatasetError::Invalid(format!(
                    "measurement {i} has sigma {}",
                    m.sigma
                )));
            }
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.keyframes.iter().all(|k| k.ground_truth.is_some())
            && self.landmarks.iter().all(|l| l.ground_truth.is_some())
    }

    pub fn outlier_labels(&self) -> Vec<bool> {
        self.measurements.iter().map(|m| m.outlier).collect()
    }

    /// Copy with initial states replaced by ground truth.
    pub fn at_ground_truth(&self) -> Result<ProblemSpec, DatasetError> {
        let mut out = self.clone();
        for kf in &mut out.keyframes {
            kf.pose = kf
                .ground_truth
                .ok_or_else(|| DatasetError::MissingGroundTruth(format!("keyframe {}", kf.id)))?;
        }
        for lm in &mut out.landmarks {
            lm.position = lm
                .ground_truth
                .ok_or_else(|| DatasetError::MissingGroundTruth(format!("landmark {}", lm.id)))?;
        }
        Ok(out)
    }

    /// Sub-problem holding keyframes `0..n` and every landmark they observe.
    /// Landmarks are renumbered in order of first appearance.
    pub fn prefix(&self, n_keyframes: usize) -> ProblemSpec {
        let n = n_keyframes.min(self.keyframes.len());
        let mut out = ProblemSpec::new(self.intrinsics);
        out.metadata = self.metadata.clone();
        out.keyframes = self.keyframes[..n].to_vec();
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        for m in self.measurements.iter().filter(|m| m.keyframe < n) {
            let next = remap.len();
            let id = *remap.entry(m.landmark).or_insert_with(|| {
                let mut lm = self.landmarks[m.landmark].clone();
                lm.id = next;
                out.landmarks.push(lm);
                next
            });
            let mut mm = m.clone();
            mm.landmark = id;
            out.measurements.push(mm);
        }
        out
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serialises to the native text format.
pub fn to_native_string(problem: &ProblemSpec) -> String {
    let mut s = String::new();
    let k = &problem.intrinsics;
    let _ = writeln!(s, "{FORMAT_MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(
        s,
        "intrinsics {} {} {} {}",
        fmt_f(k.fx),
        fmt_f(k.fy),
        fmt_f(k.cx),
        fmt_f(k.cy)
    );
    for (key, value) in &problem.metadata {
        let _ = writeln!(s, "meta {key} {value}");
    }
    let pose_fields = |p: &Pose| {
        p.rotation
            .iter()
            .chain(p.translation.iter())
            .map(|v| fmt_f(*v))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let vec_fields = |v: &Vector3<f64>| v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "keyframes {}", problem.keyframes.len());
    for kf in &problem.keyframes {
        let _ = write!(s, "{} {}", kf.id, pose_fields(&kf.pose));
        if let Some(gt) = &kf.ground_truth {
            let _ = write!(s, " gt {}", pose_fields(gt));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "landmarks {}", problem.landmarks.len());
    for lm in &problem.landmarks {
        let _ = write!(s, "{} {}", lm.id, vec_fields(&lm.position));
        if let Some(gt) = &lm.ground_truth {
            let _ = write!(s, " gt {}", vec_fields(gt));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "measurements {}", problem.measurements.len());
    for m in &problem.measurements {
        let _ = write!(
            s,
            "{} {} {} {} {}",
            m.keyframe,
            m.landmark,
            fmt_f(m.pixel.x),
            fmt_f(m.pixel.y),
            fmt_f(m.sigma)
        );
        if m.outlier {
            s.push_str(" outlier");
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-blank, non-comment line as (line number, tokens).
    fn next_record(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            return Some((i + 1, content.split_whitespace().collect()));
        }
        None
    }

    fn expect_record(&mut self, what: &str) -> Result<(usize, Vec<&'a str>), DatasetError> {
        self.next_record().ok_or_else(|| {
            parse_err(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )
        })
    }
}

fn num<T: std::str::FromStr>(line: usize, tok: &str, what: &str) -> Result<T, DatasetError> {
    tok.parse::<T>()
        .map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
}

fn floats(line: usize, toks: &[&str]) -> Result<Vec<f64>, DatasetError> {
    toks.iter().map(|t| num::<f64>(line, t, "number")).collect()
}

fn header_count(rec: (usize, Vec<&str>), keyword: &str) -> Result<usize, DatasetError> {
    let (line, toks) = rec;
    if toks.len() != 2 || toks[0] != keyword {
        return Err(parse_err(line, format!("expected `{keyword} <count>`")));
    }
    num(line, toks[1], "count")
}

/// Parses the native text format.
pub fn from_native_str(text: &str) -> Result<ProblemSpec, DatasetError> {
    let mut lines = Lines::new(text);
    let (line, toks) = lines.expect_record("header")?;
    if toks.first() != Some(&FORMAT_MAGIC) || toks.len() != 2 {
        return Err(parse_err(
            line,
            format!("expected `{FORMAT_MAGIC} <version>` header"),
        ));
    }
    if toks[1] != FORMAT_VERSION.to_string() {
        return Err(DatasetError::Version {
            found: toks[1].to_string(),
            expected: FORMAT_VERSION,
        });
    }
    let (line, toks) = lines.expect_record("intrinsics")?;
    if toks.len() != 5 || toks[0] != "intrinsics" {
        return Err(parse_err(line, "expected `intrinsics <fx> <fy> <cx> <cy>`"));
    }
    let k = floats(line, &toks[1..])?;
    let intrinsics =
        Intrinsics::new(k[0], k[1], k[2], k[3]).map_err(|e| parse_err(line, e.to_string()))?;
    let mut problem = ProblemSpec::new(intrinsics);

    let mut rec = lines.expect_record("keyframes")?;
    while rec.1[0] == "meta" {
        let (line, toks) = &rec;
        if toks.len() < 2 {
            return Err(parse_err(*line, "meta line needs a key"));
        }
        problem
            .metadata
            .insert(toks[1].to_string(), toks[2..].join(" "));
        rec = lines.expect_record("keyframes")?;
    }

    let n_kf = header_count(rec, "keyframes")?;
    for _ in 0..n_kf {
        let (line, toks) = lines.expect_record("keyframe record")?;
        let gt = match toks.len() {
            7 => None,
            14 if toks[7] == "gt" => Some(floats(line, &toks[8..14])?),
            _ => return Err(parse_err(line, "keyframe record needs 7 or 14 fields")),
        };
        let id = num(line, toks[0], "keyframe id")?;
        let v = floats(line, &toks[1..7])?;
        let pose_of = |v: &[f64]| {
            Pose::new(
                Vector3::new(v[0], v[1], v[2]),
                Vector3::new(v[3], v[4], v[5]),
            )
        };
        problem.keyframes.push(KeyframeSpec {
            id,
            pose: pose_of(&v),
            ground_truth: gt.as_deref().map(pose_of),
        });
    }
    let n_lm = header_count(lines.expect_record("landmarks")?, "landmarks")?;
    for _ in 0..n_lm {
        let (line, toks) = lines.expect_record("landmark record")?;
        let gt = match toks.len() {
            4 => None,
            8 if toks[4] == "gt" => Some(floats(line, &toks[5..8])?),
            _ => return Err(parse_err(line, "landmark record needs 4 or 8 fields")),
        };
        let id = num(line, toks[0], "landmark id")?;
        let v = floats(line, &toks[1..4])?;
        problem.landmarks.push(LandmarkSpec {
            id,
            position: Vector3::new(v[0], v[1], v[2]),
            ground_truth: gt.map(|g| Vector3::new(g[0], g[1], g[2])),
        });
    }
    let n_meas = header_count(lines.expect_record("measurements")?, "measurements")?;
    for _ in 0..n_meas {
        let (line, toks) = lines.expect_record("measurement record")?;
        let outlier = match toks.len() {
            5 => false,
            6 if toks[5] == "outlier" => true,
            _ => {
                return Err(parse_err(
                    line,
                    "measurement record needs 5 fields plus optional `outlier`",
                ))
            }
        };
        let v = floats(line, &toks[2..5])?;
        problem.measurements.push(MeasurementSpec {
            keyframe: num(line, toks[0], "keyframe id")?,
            landmark: num(line, toks[1], "landmark id")?,
            pixel: Vector2::new(v[0], v[1]),
            sigma: v[2],
            outlier,
        });
    }
    let (line, toks) = lines.expect_record("end")?;
    if toks != ["end"] {
        return Err(parse_err(line, "expected `end`"));
    }
    if let Some((line, _)) = lines.next_record() {
        return Err(parse_err(line, "trailing content after `end`"));
    }
    problem
        .validate()
        .map_err(|e| parse_err(lines.last, e.to_string()))?;
    Ok(problem)
}

pub fn save(problem: &ProblemSpec, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    std::fs::write(path, to_native_string(problem))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ProblemSpec, DatasetError> {
    from_native_str(&std::fs::read_to_string(path)?)
}

/// Conversion between the BAL camera frame (looking down −z, y up) and ours.
const BAL_FLIP: [f64; 3] = [1.0, -1.0, -1.0];

/// Parses a Bundle Adjustment in the Large text problem.
///
/// Cameras become keyframes and points landmarks. BAL stores a focal length
/// and two radial distortion terms per camera; distortion is dropped with a
/// warning and every camera's measurements are rescaled to the first camera's
/// focal length, which is exact for undistorted pinhole projection.
pub fn parse_bal(text: &str) -> Result<ProblemSpec, DatasetError> {
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)));
    let last_line = text.lines().count();
    let mut next = |what: &str| -> Result<(usize, &str), DatasetError> {
        tokens
            .next()
            .ok_or_else(|| parse_err(last_line, format!("truncated file: expected {what}")))
    };
    let (l, t) = next("camera count")?;
    let n_cam: usize = num(l, t, "camera count")?;
    let (l, t) = next("point count")?;
    let n_pt: usize = num(l, t, "point count")?;
    let (l, t) = next("observation count")?;
    let n_obs: usize = num(l, t, "observation count")?;

    let mut raw_obs = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let (l, t) = next("observation camera index")?;
        let cam: usize = num(l, t, "camera index")?;
        let (l2, t) = next("observation point index")?;
        let pt: usize = num(l2, t, "point index")?;
        if cam >= n_cam {
            return Err(parse_err(
                l,
                format!("camera index {cam} out of range ({n_cam} cameras)"),
            ));
        }
        if pt >= n_pt {
            return Err(parse_err(
                l2,
                format!("point index {pt} out of range ({n_pt} points)"),
            ));
        }
        let (l, t) = next("observation x")?;
        let x: f64 = num(l, t, "observation x")?;
        let (l, t) = next("observation y")?;
        let y: f64 = num(l, t, "observation y")?;
        raw_obs.push((cam, pt, x, y));
    }
    let mut cams = Vec::with_capacity(n_cam);
    for _ in 0..n_cam {
        let mut p = [0.0; 9];
        for v in p.iter_mut() {
            let (l, t) = next("camera parameter")?;
            *v = num(l, t, "camera parameter")?;
        }
        cams.push(p);
    }
    let mut points = Vec::with_capacity(n_pt);
    for _ in 0..n_pt {
        let mut p = [0.0; 3];
        for v in p.iter_mut() {
            let (l, t) = next("point coordinate")?;
            *v = num(l, t, "point coordinate")?;
        }
        points.push(Vector3::new(p[0], p[1], p[2]));
    }
    let Some(first) = cams.first() else {
        return Err(DatasetError::Invalid("BAL problem has no cameras".into()));
    };
    let focal = first[6];
    if !(focal > 0.0) {
        return Err(DatasetError::Invalid(format!(
            "non-positive focal length {focal}"
        )));
    }
    if cams.iter().any(|c| c[7] != 0.0 || c[8] != 0.0) {
        log::warn!("BAL import: radial distortion terms dropped, model is undistorted pinhole");
    }
    if cams.iter().any(|c| c[6] != focal) {
        log::warn!("BAL import: per-camera focal lengths rescaled to {focal}");
    }
    let flip = Matrix3::from_diagonal(&Vector3::from(BAL_FLIP));
    let mut problem =
        ProblemSpec::new(Intrinsics::new(focal, focal, 0.0, 0.0).expect("positive focal"));
    for (id, c) in cams.iter().enumerate() {
        let r_bal = Pose::new(Vector3::new(c[0], c[1], c[2]), Vector3::zeros()).rotation_matrix();
        let r = flip * r_bal;
        let t = flip * Vector3::new(c[3], c[4], c[5]);
        problem.keyframes.push(KeyframeSpec {
            id,
            pose: Pose::from_rotation_matrix(&r, t),
            ground_truth: None,
        });
    }
    for (id, p) in points.into_iter().enumerate() {
        problem.landmarks.push(LandmarkSpec {
            id,
            position: p,
            ground_truth: None,
        });
    }
    for (cam, pt, x, y) in raw_obs {
        let scale = focal / cams[cam][6];
        problem.measurements.push(MeasurementSpec {
            keyframe: cam,
            landmark: pt,
            pixel: Vector2::new(x * scale, -y * scale),
            sigma: scale,
            outlier: false,
        });
    }
    problem.metadata.insert("source".into(), "bal".into());
    Ok(problem)
}

pub fn import_bal(path: impl AsRef<Path>) -> Result<ProblemSpec, DatasetError> {
    parse_bal(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Cameras on a horizontal arc around the scene centre, all facing it.
    Arc { radius: f64, span: f64 },
    /// Cameras translating along x at fixed distance, facing +z.
    Line { distance: f64, length: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_keyframes: usize,
    pub n_landmarks: usize,
    pub trajectory: Trajectory,
    /// Landmark half extents of the box centred on the origin.
    pub box_half_extents: Vector3<f64>,
    /// Maximum camera-to-landmark distance for a landmark to be observed.
    pub visibility_radius: f64,
    /// Standard deviation of the injected pixel noise.
    pub pixel_noise: f64,
    /// σ written for every measurement; `None` uses `pixel_noise` (1 px when
    /// the noise is zero).
    pub measurement_sigma: Option<f64>,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_keyframes: 10,
            n_landmarks: 100,
            trajectory: Trajectory::Arc {
                radius: 1.0,
                span: 2.0,
            },
            box_half_extents: Vector3::new(0.32, 0.24, 0.16),
            visibility_radius: 10.0,
            pixel_noise: 1.0,
            measurement_sigma: None,
            seed: 0,
            intrinsics: Intrinsics::default(),
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - center).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let r_cw = Matrix3::from_columns(&[x, y, z]);
    let r_wc = r_cw.transpose();
    Pose::from_rotation_matrix(&r_wc, -(r_wc * center))
}

fn trajectory_poses(params: &SynthParams) -> Vec<Pose> {
    let n = params.n_keyframes;
    let frac = |i: usize| {
        if n > 1 {
            i as f64 / (n - 1) as f64 - 0.5
        } else {
            0.0
        }
    };
    (0..n)
        .map(|i| match params.trajectory {
            Trajectory::Arc { radius, span } => {
                let phi = span * frac(i);
                look_at(
                    Vector3::new(radius * phi.sin(), 0.0, -radius * phi.cos()),
                    Vector3::zeros(),
                )
            }
            Trajectory::Line { distance, length } => {
                let c = Vector3::new(length * frac(i), 0.0, -distance);
                look_at(c, c + Vector3::new(0.0, 0.0, distance))
            }
        })
        .collect()
}

/// Generates a synthetic scene with ground truth. Initial states equal
/// ground truth; use [`perturb`] to create a starting point.
pub fn synthesize(params: &SynthParams) -> Result<ProblemSpec, DatasetError> {
    if params.n_keyframes == 0 || params.n_landmarks == 0 || params.pixel_noise < 0.0 {
        return Err(DatasetError::Degenerate(
            "need keyframes, landmarks and non-negative noise".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let poses = trajectory_poses(params);
    let h = params.box_half_extents;
    let points: Vec<Vector3<f64>> = (0..params.n_landmarks)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-h.x..=h.x),
                rng.gen_range(-h.y..=h.y),
                rng.gen_range(-h.z..=h.z),
            )
        })
        .collect();
    let noise = Normal::new(0.0, params.pixel_noise.max(0.0)).expect("finite sigma");
    let sigma_file = match params.measurement_sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(DatasetError::Degenerate(format!("measurement sigma {s}"))),
        None if params.pixel_noise > 0.0 => params.pixel_noise,
        None => 1.0,
    };

    let k = &params.intrinsics;
    let mut problem = ProblemSpec::new(*k);
    for (id, pose) in poses.iter().enumerate() {
        problem.keyframes.push(KeyframeSpec {
            id,
            pose: *pose,
            ground_truth: Some(*pose),
        });
    }
    for point in &points {
        let mut obs = Vec::new();
        for (kf, pose) in poses.iter().enumerate() {
            let pc = pose.transform(point);
            if pc.z < 0.1 || (point - pose.center()).norm() > params.visibility_radius {
                continue;
            }
            let Ok(px) = project(pose, point, k) else {
                continue;
            };
            if px.x < 0.0 || px.x >= params.image_width || px.y < 0.0 || px.y >= params.image_height
            {
                continue;
            }
            obs.push((kf, px));
        }
        if obs.len() < 2 {
            continue;
        }
        let id = problem.landmarks.len();
        problem.landmarks.push(LandmarkSpec {
            id,
            position: *point,
            ground_truth: Some(*point),
        });
        for (kf, px) in obs {
            let pixel = if params.pixel_noise > 0.0 {
                px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                px
            };
            problem.measurements.push(MeasurementSpec {
                keyframe: kf,
                landmark: id,
                pixel,
                sigma: sigma_file,
                outlier: false,
            });
        }
    }
    if problem.landmarks.is_empty() {
        return Err(DatasetError::Degenerate(
            "no landmark is observed by two keyframes".into(),
        ));
    }
    // keyframe-major measurement order
    problem
        .measurements
        .sort_by_key(|m| (m.keyframe, m.landmark));
    let md = &mut problem.metadata;
    md.insert("generator".into(), "synthesize".into());
    md.insert("seed".into(), params.seed.to_string());
    md.insert("pixel_noise".into(), params.pixel_noise.to_string());
    md.insert(
        "image_size".into(),
        format!("{}x{}", params.image_width, params.image_height),
    );
    Ok(problem)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LandmarkInit {
    /// Back-project the first observation to the given range along its ray.
    FirstObservation { range: f64 },
    /// Isotropic Gaussian noise on the ground-truth position.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbParams {
    /// Standard deviation of the keyframe translation noise (world units).
    pub keyframe_sigma: f64,
    pub landmark_init: LandmarkInit,
    pub seed: u64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self {
            keyframe_sigma: 0.07,
            landmark_init: LandmarkInit::FirstObservation { range: 1.0 },
            seed: 0,
        }
    }
}

/// Landmark position on the bearing ray of a pixel at the given range.
pub fn back_project(pose: &Pose, pixel: &Vector2<f64>, k: &Intrinsics, range: f64) -> Vector3<f64> {
    let ray = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0).normalize();
    let pc = ray * range;
    pose.rotation_matrix().transpose() * (pc - pose.translation)
}

/// Creates a noisy initialisation from ground truth.
pub fn perturb(problem: &ProblemSpec, params: &PerturbParams) -> Result<ProblemSpec, DatasetError> {
    let mut out = problem.at_ground_truth()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for kf in &mut out.keyframes {
        let n = Vector3::new(
            std_normal.sample(&mut rng),
            std_normal.sample(&mut rng),
            std_normal.sample(&mut rng),
        );
        kf.pose.translation += n * params.keyframe_sigma;
    }
    match params.landmark_init {
        LandmarkInit::FirstObservation { range } => {
            let mut first: Vec<Option<&MeasurementSpec>> = vec![None; out.landmarks.len()];
            for m in &problem.measurements {
                let slot = &mut first[m.landmark];
                if slot.is_none_or(|f| m.keyframe < f.keyframe) {
                    *slot = Some(m);
                }
            }
            for (lm, obs) in out.landmarks.iter_mut().zip(first) {
                if let Some(m) = obs {
                    lm.position = back_project(
                        &out.keyframes[m.keyframe].pose,
                        &m.pixel,
                        &out.intrinsics,
                        range,
                    );
                }
            }
        }
        LandmarkInit::Gaussian { sigma } => {
            for lm in &mut out.landmarks {
                let n = Vector3::new(
                    std_normal.sample(&mut rng),
                    std_normal.sample(&mut rng),
                    std_normal.sample(&mut rng),
                );
                lm.position += n * sigma;
            }
        }
    }
    out.metadata
        .insert("perturb_seed".into(), params.seed.to_string());
    out.metadata
        .insert("keyframe_sigma".into(), params.keyframe_sigma.to_string());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierMode {
    /// Re-associate the measurement with another landmark seen by the same keyframe.
    Reassign,
    /// Replace the pixel with a uniform draw over the image.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutlierSummary {
    pub labelled: usize,
    pub skipped: usize,
}

fn image_size(problem: &ProblemSpec) -> (f64, f64) {
    problem
        .metadata
        .get("image_size")
        .and_then(|s| {
            let (w, h) = s.split_once('x')?;
            Some((w.parse().ok()?, h.parse().ok()?))
        })
        .unwrap_or((640.0, 480.0))
}

/// Corrupts `round(fraction · N)` measurements and labels them.
pub fn inject_outliers(
    problem: &ProblemSpec,
    fraction: f64,
    mode: OutlierMode,
    seed: u64,
) -> Result<(ProblemSpec, OutlierSummary), DatasetError> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(DatasetError::Invalid(format!(
            "outlier fraction {fraction} outside [0, 0.5]"
        )));
    }
    let mut out = problem.clone();
    let n = problem.measurements.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let (chosen, _) = indices.partial_shuffle(&mut rng, count);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();

    let mut seen_by: Vec<Vec<usize>> = vec![Vec::new(); problem.keyframes.len()];
    for m in &problem.measurements {
        if !seen_by[m.keyframe].contains(&m.landmark) {
            seen_by[m.keyframe].push(m.landmark);
        }
    }
    let (w, h) = image_size(problem);
    let mut summary = OutlierSummary::default();
    for idx in chosen {
        let m = &mut out.measurements[idx];
        match mode {
            OutlierMode::Uniform => {
                m.pixel = Vector2::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            }
            OutlierMode::Reassign => {
                let others: Vec<usize> = seen_by[m.keyframe]
                    .iter()
                    .copied()
                    .filter(|l| *l != m.landmark)
                    .collect();
                let Some(&other) = others.choose(&mut rng) else {
                    summary.skipped += 1;
                    continue;
                };
                m.landmark = other;
            }
        }
        m.outlier = true;
        summary.labelled += 1;
    }
    out.metadata
        .insert("outlier_fraction".into(), fraction.to_string());
    out.metadata.insert("outlier_seed".into(), seed.to_string());
    Ok((out, summary))
}
