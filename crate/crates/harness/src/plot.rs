//! Condition-by-condition figures: mean Δlogprob with 95% intervals
//! against model size (scaling) or training step (training).

use std::path::{Path, PathBuf};

use plotters::coord::ranged1d::{AsRangedCoord, ValueFormatter};
use plotters::coord::types::RangedCoordf64;
use plotters::prelude::*;
use polarity_core::{Checkpoint, Condition, Family};

use crate::backend::{PythiaModel, PYTHIA_FINAL_STEP};
use crate::report::{self, ReportError, SummaryRow};
use crate::sweep::{CellStatus, Run};

pub const Y_LABEL: &str = "Δlogprob (more positive y-values mean more negative continuations)";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FigureKind {
    Scaling,
    Training,
}

impl FigureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FigureKind::Scaling => "scaling",
            FigureKind::Training => "training",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scaling" => Some(FigureKind::Scaling),
            "training" => Some(FigureKind::Training),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FigureSpec {
    pub kind: FigureKind,
    pub family: Family,
    /// Model of a training figure; optional when the run has one model.
    pub model: Option<String>,
}

/// One x position.
#[derive(Clone, Debug, PartialEq)]
pub struct XPoint {
    pub x: f64,
    pub label: String,
    pub model: String,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub condition: Condition,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureData {
    pub spec: FigureSpec,
    pub title: String,
    pub x_label: String,
    /// False when x positions are ordinal (models of unknown size).
    pub log_x: bool,
    pub xs: Vec<XPoint>,
    pub series: Vec<Series>,
}

fn gaps(msgs: Vec<String>) -> ReportError {
    ReportError::Gaps(msgs)
}

fn scaling_positions(run: &Run) -> Result<(Vec<XPoint>, bool), ReportError> {
    let m = run.manifest();
    let cps: Vec<Checkpoint> = m.checkpoints.iter().filter_map(|c| Checkpoint::parse(c)).collect();
    let checkpoint = if cps.contains(&Checkpoint::Final) {
        Checkpoint::Final
    } else if cps.len() == 1 {
        cps[0]
    } else {
        return Err(gaps(vec![
            "a scaling figure needs the final checkpoint or a single checkpoint in the run".into(),
        ]));
    };
    let sizes: Vec<Option<f64>> = m
        .models
        .iter()
        .map(|name| PythiaModel::parse(name).map(|p| p.parameters))
        .collect();
    let log_x = sizes.iter().all(Option::is_some);
    let mut xs: Vec<XPoint> = m
        .models
        .iter()
        .zip(&sizes)
        .enumerate()
        .map(|(i, (name, size))| XPoint {
            x: if log_x { size.expect("all known") } else { (i + 1) as f64 },
            label: name.clone(),
            model: name.clone(),
            checkpoint,
        })
        .collect();
    xs.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok((xs, log_x))
}

fn training_positions(run: &Run, model: Option<&str>) -> Result<(Vec<XPoint>, bool), ReportError> {
    let m = run.manifest();
    let model = match model {
        Some(name) => {
            if !m.models.iter().any(|x| x == name) {
                return Err(gaps(vec![format!("model {name} is not part of run {}", m.run_id)]));
            }
            name.to_string()
        }
        None if m.models.len() == 1 => m.models[0].clone(),
        None => {
            return Err(gaps(vec![format!(
                "run {} has {} models; pick one for the training figure",
                m.run_id,
                m.models.len()
            )]))
        }
    };
    let cps: Vec<Checkpoint> = m.checkpoints.iter().filter_map(|c| Checkpoint::parse(c)).collect();
    let max_step = cps
        .iter()
        .filter_map(|c| match c {
            Checkpoint::Step(n) => Some(*n),
            Checkpoint::Final => None,
        })
        .max();
    let final_step = if PythiaModel::parse(&model).is_some() {
        PYTHIA_FINAL_STEP
    } else {
        max_step.map_or(1, |s| s.max(1) * 10)
    };
    let mut xs: Vec<XPoint> = cps
        .iter()
        .map(|&c| {
            let (x, label) = match c {
                Checkpoint::Step(0) => (0.5, "0".to_string()),
                Checkpoint::Step(n) => (n as f64, n.to_string()),
                Checkpoint::Final => (final_step as f64, "final".to_string()),
            };
            XPoint {
                x,
                label,
                model: model.clone(),
                checkpoint: c,
            }
        })
        .collect();
    xs.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok((xs, true))
}

/// Collects the summaries a figure needs, failing with every gap found.
pub fn figure_data(run: &Run, spec: &FigureSpec) -> Result<FigureData, ReportError> {
    let m = run.manifest();
    if !m.families().contains(&spec.family) {
        return Err(gaps(vec![format!("run {} has no {} stimuli", m.run_id, spec.family)]));
    }
    let (xs, log_x) = match spec.kind {
        FigureKind::Scaling => scaling_positions(run)?,
        FigureKind::Training => training_positions(run, spec.model.as_deref())?,
    };
    let statuses = run.statuses()?;
    let mut missing = Vec::new();
    for x in &xs {
        let done = m
            .cells
            .iter()
            .zip(&statuses)
            .any(|(c, r)| c.model == x.model && c.checkpoint() == x.checkpoint && r.status == CellStatus::Done);
        if !done {
            missing.push(format!("model {} at checkpoint {} has no finished results", x.model, x.checkpoint));
        }
    }
    if !missing.is_empty() {
        return Err(gaps(missing));
    }
    let rows: Vec<SummaryRow> = report::run_summaries(run)?;
    let mut series = Vec::new();
    for &condition in spec.family.conditions() {
        let mut points = Vec::new();
        for x in &xs {
            let row = rows.iter().find(|r| {
                r.condition == condition && r.model == x.model && Checkpoint::parse(&r.checkpoint) == Some(x.checkpoint)
            });
            match row.and_then(|r| r.ci.map(|ci| (r.mean_delta, ci))) {
                Some((mean, (low, high))) => points.push(Point {
                    x: x.x,
                    mean,
                    low,
                    high,
                }),
                None => missing.push(format!(
                    "condition {condition} has no summary for {} at checkpoint {}",
                    x.model, x.checkpoint
                )),
            }
        }
        series.push(Series { condition, points });
    }
    if !missing.is_empty() {
        return Err(gaps(missing));
    }
    let x_label = match (spec.kind, log_x) {
        (FigureKind::Scaling, true) => "parameters (log scale)",
        (FigureKind::Scaling, false) => "model",
        (FigureKind::Training, _) => "training step (log scale)",
    };
    let title = match spec.kind {
        FigureKind::Scaling => format!("{} by model size", spec.family.as_str().to_uppercase()),
        FigureKind::Training => format!(
            "{} over training, {}",
            spec.family.as_str().to_uppercase(),
            xs.first().map(|x| x.model.as_str()).unwrap_or("")
        ),
    };
    Ok(FigureData {
        spec: spec.clone(),
        title,
        x_label: x_label.into(),
        log_x,
        xs,
        series,
    })
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn human(x: f64) -> String {
    let (v, unit) = if x >= 1e9 {
        (x / 1e9, "B")
    } else if x >= 1e6 {
        (x / 1e6, "M")
    } else if x >= 1e3 {
        (x / 1e3, "k")
    } else {
        (x, "")
    };
    let s = format!("{v:.1}");
    format!("{}{unit}", s.trim_end_matches(".0"))
}

fn plot_err<E: std::fmt::Display>(e: E) -> ReportError {
    ReportError::Plot(e.to_string())
}

fn draw<X>(root: &DrawingArea<SVGBackend, plotters::coord::Shift>, data: &FigureData, x_range: X) -> Result<(), ReportError>
where
    X: AsRangedCoord<Value = f64>,
    X::CoordDescType: ValueFormatter<f64>,
{
    let (lo, hi) = data
        .series
        .iter()
        .flat_map(|s| &s.points)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.low), hi.max(p.high)));
    let pad = if hi > lo { (hi - lo) * 0.1 } else { 1.0 };
    let y: RangedCoordf64 = ((lo - pad)..(hi + pad)).into();
    let mut chart = ChartBuilder::on(root)
        .caption(&data.title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(64)
        .build_cartesian_2d(x_range, y)
        .map_err(plot_err)?;
    let xs = data.xs.clone();
    let log_x = data.log_x;
    let kind = data.spec.kind;
    let fmt = move |v: &f64| -> String {
        if !log_x {
            let i = v.round() as usize;
            return xs.get(i.wrapping_sub(1)).map(|p| p.label.clone()).unwrap_or_default();
        }
        match kind {
            FigureKind::Scaling => human(*v),
            FigureKind::Training => format!("{}", v.round()),
        }
    };
    let mut mesh = chart.configure_mesh();
    mesh.x_desc(data.x_label.as_str())
        .y_desc(Y_LABEL)
        .x_label_formatter(&fmt)
        .y_label_formatter(&|v: &f64| format!("{v:.2}"));
    if !log_x {
        mesh.x_labels(data.xs.len());
    }
    mesh.draw().map_err(plot_err)?;
    for s in &data.series {
        let color = PALETTE[s.condition.ordinal() % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (p.x, p.mean)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.condition.label())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|p| ErrorBar::new_vertical(p.x, p.low, p.mean, p.high, color.filled(), 8)))
            .map_err(plot_err)?;
        chart
            .draw_series(s.points.iter().map(|p| Circle::new((p.x, p.mean), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

/// Writes `data` as an SVG file.
pub fn render_svg(data: &FigureData, path: &Path) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (min, max) = data
        .xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    if data.log_x {
        draw(&root, data, ((min / 1.5)..(max * 1.5)).log_scale())?;
    } else {
        draw(&root, data, 0.5..(data.xs.len() as f64 + 0.5))?;
    }
    root.present().map_err(plot_err)
}

/// Draws one figure into `out_dir` and returns its path.
pub fn plot(run: &Run, spec: &FigureSpec, out_dir: &Path) -> Result<PathBuf, ReportError> {
    let data = figure_data(run, spec)?;
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = out_dir.join(format!("{}-{}.svg", spec.kind.as_str(), spec.family));
    render_svg(&data, &path)?;
    Ok(path)
}
