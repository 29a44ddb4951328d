//! Localisation metrics, false-positive rate and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{PreparedSample, PreparedSplit};
use crate::geometry::{Point, SplitName, NO_DAMAGE_TARGET};
use crate::training::{ModelKind, TrainedRun};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub normalized: f64,
    pub mm: f64,
}

/// Mean Euclidean distance in normalised units, and in millimetres.
pub fn mae(predictions: &[Point], truths: &[Point], side_length_mm: f64) -> Result<Mae> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Metric(format!(
            "MAE needs equal non-empty lists, got {} predictions and {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .sum();
    let normalized = total / predictions.len() as f64;
    Ok(Mae {
        normalized,
        mm: normalized * side_length_mm,
    })
}

/// `true` when the prediction means "no damage", i.e. it falls outside the
/// plate domain grown by `margin` on every side.
pub fn classify_no_damage(p: Point, margin: f64) -> bool {
    let inside = |v: f64| v >= -margin && v <= 1.0 + margin;
    !(inside(p[0]) && inside(p[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fpr {
    pub false_positives: usize,
    pub total: usize,
}

impl Fpr {
    pub fn rate(&self) -> f64 {
        self.false_positives as f64 / self.total as f64
    }

    pub fn fraction(&self) -> String {
        format!("{}/{}", self.false_positives, self.total)
    }

    pub fn percent(&self) -> String {
        format!("{:.1}%", 100.0 * self.rate())
    }
}

/// Share of pristine predictions mapped to an admissible damage location.
pub fn fpr(pristine_predictions: &[Point], margin: f64) -> Result<Fpr> {
    if pristine_predictions.is_empty() {
        return Err(Error::Metric("FPR needs at least one pristine prediction".into()));
    }
    Ok(Fpr {
        false_positives: pristine_predictions
            .iter()
            .filter(|p| !classify_no_damage(**p, margin))
            .count(),
        total: pristine_predictions.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Zone {
    /// Damaged validation samples from the training zone.
    Seen,
    /// Damaged samples from the held-out zone.
    Unseen,
    Pristine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub zone: Zone,
    pub truth: Point,
    pub prediction: Point,
    pub predicted_damaged: bool,
}

/// Metrics of one trained model on one split and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub split: SplitName,
    pub model: ModelKind,
    pub seed: u64,
    pub config_hash: String,
    pub side_length_mm: f64,
    pub margin: f64,
    pub seen: Option<Mae>,
    pub unseen: Option<Mae>,
    pub fpr: Option<Fpr>,
    pub transducers: Vec<Point>,
    pub predictions: Vec<SamplePrediction>,
}

impl RunEvaluation {
    pub fn key(&self) -> (SplitName, ModelKind, u64) {
        (self.split, self.model, self.seed)
    }

    pub fn map_name(&self) -> String {
        format!("{}_{}_{}.png", self.split, self.model, self.seed)
    }
}

fn zone_mae(preds: &[SamplePrediction], zone: Zone, side: f64) -> Result<Option<Mae>> {
    let (p, t): (Vec<Point>, Vec<Point>) = preds
        .iter()
        .filter(|s| s.zone == zone)
        .map(|s| (s.prediction, s.truth))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    mae(&p, &t, side).map(Some)
}

/// Predicts every seen-zone validation, held-out and pristine test sample.
pub fn evaluate_run<T: Scalar>(
    run: &TrainedRun<T>,
    prepared: &PreparedSplit<T>,
    margin: f64,
) -> Result<RunEvaluation> {
    let seen = prepared.val.iter().filter(|s| s.is_damaged()).map(|s| (s, Zone::Seen));
    let test = prepared.test.iter().map(|s| {
        let zone = if s.is_damaged() { Zone::Unseen } else { Zone::Pristine };
        (s, zone)
    });
    let predict = |(s, zone): (&PreparedSample<T>, Zone)| -> Result<SamplePrediction> {
        let prediction = run.predict(s)?;
        Ok(SamplePrediction {
            id: s.id.clone(),
            zone,
            truth: s.target(),
            prediction,
            predicted_damaged: !classify_no_damage(prediction, margin),
        })
    };
    let predictions = seen.chain(test).map(predict).collect::<Result<Vec<_>>>()?;
    let side = prepared.side_length_mm();
    let pristine: Vec<Point> = predictions
        .iter()
        .filter(|s| s.zone == Zone::Pristine)
        .map(|s| s.prediction)
        .collect();
    Ok(RunEvaluation {
        split: prepared.assignment.spec.name,
        model: run.manifest.model,
        seed: run.manifest.seed,
        config_hash: run.manifest.config_hash.clone(),
        side_length_mm: side,
        margin,
        seen: zone_mae(&predictions, Zone::Seen, side)?,
        unseen: zone_mae(&predictions, Zone::Unseen, side)?,
        fpr: if pristine.is_empty() { None } else { Some(fpr(&pristine, margin)?) },
        transducers: prepared.layout.coordinates().to_vec(),
        predictions,
    })
}

/// Mean and population standard deviation; `std` is omitted for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt());
        Some(Self { mean, std, n })
    }

    fn render(&self, scale: f64, digits: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", digits, self.mean * scale, digits, s * scale),
            None => format!("{:.*}", digits, self.mean * scale),
        }
    }
}

/// Seeds of one split and model combined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: SplitName,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub single_seed: bool,
    pub seen_mae: Option<Summary>,
    pub unseen_mae: Option<Summary>,
    pub unseen_mae_mm: Option<Summary>,
    pub fpr: Option<Summary>,
    pub fpr_counts: Vec<Fpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregates: Vec<Aggregate>,
    pub runs: Vec<RunEvaluation>,
}

/// Groups runs by split and model. Runs are sorted so that the result does
/// not depend on input order.
pub fn aggregate(runs: &[RunEvaluation]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Report("no completed runs to report".into()));
    }
    let mut runs = runs.to_vec();
    runs.sort_by_key(|r| r.key());
    if let Some(w) = runs.windows(2).find(|w| w[0].key() == w[1].key()) {
        let (s, m, seed) = w[0].key();
        return Err(Error::Report(format!("duplicate run for split {s}, model {m}, seed {seed}")));
    }
    let mut groups: BTreeMap<(SplitName, ModelKind), Vec<&RunEvaluation>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.split, r.model)).or_default().push(r);
    }
    let aggregates = groups
        .into_iter()
        .map(|((split, model), rs)| {
            let pick = |f: &dyn Fn(&RunEvaluation) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                Summary::of(&v)
            };
            Aggregate {
                split,
                model,
                seeds: rs.iter().map(|r| r.seed).collect(),
                single_seed: rs.len() == 1,
                seen_mae: pick(&|r| r.seen.map(|m| m.normalized)),
                unseen_mae: pick(&|r| r.unseen.map(|m| m.normalized)),
                unseen_mae_mm: pick(&|r| r.unseen.map(|m| m.mm)),
                fpr: pick(&|r| r.fpr.map(|f| f.rate())),
                fpr_counts: rs.iter().filter_map(|r| r.fpr).collect(),
            }
        })
        .collect();
    Ok(EvalReport { aggregates, runs })
}

/// Lists the `(split, model, seed)` combinations missing from `runs`.
pub fn missing_runs(runs: &[RunEvaluation], expected: &[(SplitName, ModelKind, u64)]) -> Vec<String> {
    expected
        .iter()
        .filter(|k| !runs.iter().any(|r| r.key() == **k))
        .map(|(s, m, seed)| format!("split {s} model {m} seed {seed}"))
        .collect()
}

fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::from("# Localisation results\n\n");
    out.push_str("MAE in normalised plate units (mm in parentheses). Seen MAE is measured on the damaged validation subset of the training zone. FPR counts pristine test samples mapped inside the plate.\n\n");
    out.push_str("| Split | Model | Seeds | Seen MAE | Unseen MAE | FPR |\n|---|---|---|---|---|---|\n");
    let dash = || "n/a".to_string();
    for a in &report.aggregates {
        let seeds = a.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let flag = if a.single_seed { " (single seed, no std)" } else { "" };
        let seen = a.seen_mae.map_or_else(dash, |s| s.render(1.0, 3));
        let unseen = match (a.unseen_mae, a.unseen_mae_mm) {
            (Some(n), Some(mm)) => format!("{} ({} mm)", n.render(1.0, 3), mm.render(1.0, 1)),
            _ => dash(),
        };
        let fpr = match a.fpr {
            Some(f) => {
                let counts = a.fpr_counts.iter().map(Fpr::fraction).collect::<Vec<_>>().join(", ");
                format!("{}% [{counts}]", f.render(100.0, 1))
            }
            None => dash(),
        };
        let _ = writeln!(out, "| {} | {} | {seeds}{flag} | {seen} | {unseen} | {fpr} |", a.split, a.model);
    }
    out.push_str("\nMaps: `maps/<split>_<model>_<seed>.png`. Markers: green circle = true damage location, red cross = prediction inside the plate (damaged), blue square = prediction outside the plate (no damage), black diamond = no-damage reference point, grey triangle = transducer.\n");
    out
}

/// Marker colours of the localisation maps, in legend order.
pub const MARKER_COLORS: [(&str, [u8; 3]); 5] = [
    ("true", [0, 160, 0]),
    ("predicted-damaged", [220, 0, 0]),
    ("predicted-undamaged", [0, 70, 220]),
    ("no-damage-reference", [0, 0, 0]),
    ("transducer", [128, 128, 128]),
];

const MAP_SIZE: u32 = 480;
const VIEW: (f64, f64) = (-0.1, 1.1);

fn to_pixel(p: Point) -> (i64, i64) {
    let span = VIEW.1 - VIEW.0;
    let scale = (MAP_SIZE - 1) as f64 / span;
    let x = ((p[0].clamp(VIEW.0, VIEW.1) - VIEW.0) * scale).round() as i64;
    let y = ((VIEW.1 - p[1].clamp(VIEW.0, VIEW.1)) * scale).round() as i64;
    (x, y)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn marker(img: &mut RgbImage, p: Point, class: usize) {
    let (cx, cy) = to_pixel(p);
    let c = Rgb(MARKER_COLORS[class].1);
    let r: i64 = 5;
    for dy in -r..=r {
        for dx in -r..=r {
            let on = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx == dy || dx == -dy,
                2 => dx.abs() == r || dy.abs() == r,
                3 => dx.abs() + dy.abs() <= r,
                _ => dy >= -r / 2 && dx.abs() <= (dy + r / 2 + 1) / 2 + 1,
            };
            if on {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Raster localisation map of one run.
pub fn render_map(run: &RunEvaluation) -> RgbImage {
    let mut img = RgbImage::from_pixel(MAP_SIZE, MAP_SIZE, Rgb([255, 255, 255]));
    let (x0, y0) = to_pixel([0.0, 1.0]);
    let (x1, y1) = to_pixel([1.0, 0.0]);
    let frame = Rgb([200, 200, 200]);
    for x in x0..=x1 {
        put(&mut img, x, y0, frame);
        put(&mut img, x, y1, frame);
    }
    for y in y0..=y1 {
        put(&mut img, x0, y, frame);
        put(&mut img, x1, y, frame);
    }
    for &t in &run.transducers {
        marker(&mut img, t, 4);
    }
    marker(&mut img, NO_DAMAGE_TARGET, 3);
    for s in run.predictions.iter().filter(|s| s.zone != Zone::Pristine) {
        marker(&mut img, s.truth, 0);
    }
    for s in &run.predictions {
        marker(&mut img, s.prediction, if s.predicted_damaged { 1 } else { 2 });
    }
    img
}

fn write_file(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.md` and one map per run under `out`.
pub fn emit_report(runs: &[RunEvaluation], out: &Path) -> Result<EvalReport> {
    let report = aggregate(runs)?;
    let maps = out.join("maps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let json = serde_json::to_string_pretty(&report)?;
    write_file(&out.join("report.json"), json + "\n")?;
    write_file(&out.join("report.md"), render_markdown(&report))?;
    for r in &report.runs {
        render_map(r).save(maps.join(r.map_name()))?;
    }
    Ok(report)
}

/// Reads every `*.eval.json` below `dir`, sorted by file name.
pub fn load_evaluations(dir: &Path) -> Result<Vec<RunEvaluation>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".eval.json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", p.display())))
        })
        .collect()
}
