//! Study report: behavioral metrics and the statistical battery over a
//! cohort of complete sessions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mixlab_core::stats::{
    descriptives, kruskal_wallis, mann_whitney_u, paired_t_test, Descriptives, StatsError,
    TestResult,
};
use mixlab_core::{
    convergence_series, count_worsenings, cumulative_fraction, step_sizes, BlendWeights,
    Convergence, MetricError, Worsenings,
};

use crate::model::{EndReason, ModeKind, ModeRef, QuestionId, PROTOCOL};
use crate::telemetry::{EventKind, TelemetryEvent};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("session '{session}' is incomplete: {reason}")]
    IncompleteSession { session: String, reason: String },
    #[error("session '{session}' is malformed: {reason}")]
    Malformed { session: String, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub mode: ModeRef,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub weights: BlendWeights,
    pub image_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeRecord {
    pub mode: ModeRef,
    pub generations: Vec<GenerationRecord>,
    pub target: Option<BlendWeights>,
    pub correct_set: Option<u8>,
    pub chosen_set: Option<u8>,
    pub end_reason: Option<EndReason>,
    pub saves: usize,
}

impl ModeRecord {
    pub fn weight_history(&self) -> Vec<BlendWeights> {
        self.generations.iter().map(|g| g.weights.clone()).collect()
    }

    pub fn chose_correct_set(&self) -> bool {
        self.chosen_set.is_some() && self.chosen_set == self.correct_set
    }

    /// Step sizes from the all-zero baseline; empty when nothing was generated.
    pub fn step_sizes(&self) -> Result<Vec<f64>, MetricError> {
        if self.generations.is_empty() {
            return Ok(Vec::new());
        }
        step_sizes(&self.weight_history())
    }

    /// Distance to target per generation, for challenge modes.
    pub fn convergence(&self) -> Option<Result<Convergence, MetricError>> {
        let target = self.target.as_ref()?;
        Some(convergence_series(
            &self.weight_history(),
            target,
            self.chose_correct_set(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub modes: Vec<ModeRecord>,
    pub survey: BTreeMap<QuestionId, u8>,
    pub ended: bool,
}

impl SessionRecord {
    /// Every protocol mode ended and every survey question answered.
    pub fn check_complete(&self) -> Result<(), AnalysisError> {
        let incomplete = |reason: String| AnalysisError::IncompleteSession {
            session: self.session_id.clone(),
            reason,
        };
        for expected in PROTOCOL {
            match self.modes.iter().find(|m| m.mode == expected) {
                Some(m) if m.end_reason.is_some() => {}
                Some(_) => return Err(incomplete(format!("mode {expected} never ended"))),
                None => return Err(incomplete(format!("mode {expected} never started"))),
            }
        }
        if let Some(q) = QuestionId::ALL.iter().find(|q| !self.survey.contains_key(q)) {
            return Err(incomplete(format!("survey question {} unanswered", q.as_str())));
        }
        Ok(())
    }

    pub fn mode(&self, mode: ModeRef) -> Option<&ModeRecord> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Projects one session's events onto per-mode records.
pub fn project_session(events: &[TelemetryEvent]) -> Result<SessionRecord, AnalysisError> {
    let session_id = events
        .first()
        .map(|e| e.session_id.clone())
        .ok_or(AnalysisError::EmptyCohort)?;
    let malformed = |reason: String| AnalysisError::Malformed {
        session: session_id.clone(),
        reason,
    };
    let mut modes: Vec<ModeRecord> = Vec::new();
    let mut survey = BTreeMap::new();
    let mut ended = false;
    for e in events {
        if e.session_id != session_id {
            return Err(malformed(format!("event for '{}' mixed in", e.session_id)));
        }
        let p = &e.payload;
        let current = |modes: &mut Vec<ModeRecord>| -> Result<usize, AnalysisError> {
            match (modes.last(), e.mode) {
                (Some(m), Some(mode)) if m.mode == mode => Ok(modes.len() - 1),
                _ => Err(malformed(format!("seq {}: {} outside its mode", e.seq, e.kind.as_str()))),
            }
        };
        match e.kind {
            EventKind::SessionStart => {}
            EventKind::ModeStart => {
                let mode = e.mode.ok_or_else(|| malformed(format!("seq {}: no mode", e.seq)))?;
                let target = p
                    .target_weights
                    .as_deref()
                    .map(BlendWeights::from_values)
                    .transpose()
                    .map_err(|err| malformed(format!("seq {}: {err}", e.seq)))?;
                modes.push(ModeRecord {
                    mode,
                    generations: Vec::new(),
                    target,
                    correct_set: p.correct_set,
                    chosen_set: None,
                    end_reason: None,
                    saves: 0,
                });
            }
            EventKind::SetChosen => {
                let i = current(&mut modes)?;
                modes[i].chosen_set = p.set_index;
            }
            EventKind::Generate => {
                let i = current(&mut modes)?;
                let weights = p
                    .weights
                    .as_deref()
                    .map(BlendWeights::from_values)
                    .transpose()
                    .map_err(|err| malformed(format!("seq {}: {err}", e.seq)))?
                    .ok_or_else(|| malformed(format!("seq {}: weights missing", e.seq)))?;
                let mode = modes[i].mode;
                modes[i].generations.push(GenerationRecord {
                    mode,
                    seq: e.seq,
                    timestamp_ms: e.timestamp_ms,
                    weights,
                    image_hash: p.image_hash.clone().unwrap_or_default(),
                });
            }
            EventKind::Save => {
                let i = current(&mut modes)?;
                modes[i].saves += 1;
            }
            EventKind::ModeEnd => {
                let i = current(&mut modes)?;
                modes[i].end_reason = p.reason;
            }
            EventKind::Survey => {
                if let (Some(q), Some(r)) = (p.question_id, p.rating) {
                    survey.insert(q, r);
                }
            }
            EventKind::SessionEnd => ended = true,
        }
    }
    Ok(SessionRecord {
        session_id,
        modes,
        survey,
        ended,
    })
}

/// Groups a flat event list (e.g. a CSV import) by session, in id order,
/// each session in seq order.
pub fn group_by_session(events: Vec<TelemetryEvent>) -> Vec<Vec<TelemetryEvent>> {
    let mut map: BTreeMap<String, Vec<TelemetryEvent>> = BTreeMap::new();
    for e in events {
        map.entry(e.session_id.clone()).or_default().push(e);
    }
    map.into_values()
        .map(|mut v| {
            v.sort_by_key(|e| e.seq);
            v
        })
        .collect()
}

/// Default CDF thresholds: 0.00 to 3.00 in steps of 0.05.
pub fn default_thresholds() -> Vec<f64> {
    (0..=60).map(|i| f64::from(i) * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCounts {
    pub mode: ModeKind,
    /// Per session, in session order; challenge levels are summed.
    pub per_session: Vec<u64>,
    pub summary: Descriptives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub session_id: String,
    pub level: u8,
    pub series: Convergence,
    pub worsenings: Option<Worsenings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTest {
    pub name: String,
    pub groups: String,
    pub result: Result<TestResult, StatsError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub session_ids: Vec<String>,
    pub generation_counts: Vec<GenerationCounts>,
    /// Pooled step sizes per mode kind, sessions in id order.
    pub step_sizes: BTreeMap<ModeKind, Vec<f64>>,
    pub thresholds: Vec<f64>,
    /// `cdf[mode][i]` is the fraction of steps at or below `thresholds[i]`.
    pub cdf: BTreeMap<ModeKind, Vec<f64>>,
    pub convergence: Vec<ConvergenceRow>,
    /// Kruskal-Wallis across the modes, then the pairwise Mann-Whitney tests,
    /// then the paired t-test on the control ratings.
    pub tests: Vec<NamedTest>,
    pub survey: Vec<(QuestionId, Descriptives)>,
}

impl StudyReport {
    pub fn test(&self, name: &str) -> Option<&NamedTest> {
        self.tests.iter().find(|t| t.name == name)
    }

    pub fn cdf_at(&self, mode: ModeKind, threshold: f64) -> Option<f64> {
        let i = self
            .thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)?;
        self.cdf.get(&mode).map(|c| c[i])
    }
}

const PAIRS: [(ModeKind, ModeKind); 3] = [
    (ModeKind::Creatures, ModeKind::Challenge),
    (ModeKind::Creatures, ModeKind::OpenPlay),
    (ModeKind::Challenge, ModeKind::OpenPlay),
];

/// Runs the full analysis over a cohort. Sessions are processed in id
/// order regardless of input order.
pub fn run_study_report(
    cohort: &[Vec<TelemetryEvent>],
    thresholds: &[f64],
) -> Result<StudyReport, AnalysisError> {
    let mut sessions = cohort
        .iter()
        .filter(|events| !events.is_empty())
        .map(|events| project_session(events))
        .collect::<Result<Vec<_>, _>>()?;
    if sessions.is_empty() {
        return Err(AnalysisError::EmptyCohort);
    }
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    for s in &sessions {
        s.check_complete()?;
    }

    let mut generation_counts = Vec::new();
    let mut pooled: BTreeMap<ModeKind, Vec<f64>> = BTreeMap::new();
    for kind in ModeKind::ALL {
        let mut per_session = Vec::new();
        let steps = pooled.entry(kind).or_default();
        for s in &sessions {
            let mut count = 0;
            for m in s.modes.iter().filter(|m| m.mode.kind == kind) {
                count += m.generations.len() as u64;
                steps.extend(m.step_sizes()?);
            }
            per_session.push(count);
        }
        let as_f64: Vec<f64> = per_session.iter().map(|&c| c as f64).collect();
        generation_counts.push(GenerationCounts {
            mode: kind,
            summary: descriptives(&as_f64)?,
            per_session,
        });
    }

    let mut cdf = BTreeMap::new();
    for (kind, steps) in &pooled {
        let fractions = if steps.is_empty() {
            vec![0.0; thresholds.len()]
        } else {
            cumulative_fraction(steps, thresholds)?
                .into_iter()
                .map(|(_, f)| f)
                .collect()
        };
        cdf.insert(*kind, fractions);
    }

    let mut convergence = Vec::new();
    for s in &sessions {
        for m in s.modes.iter().filter(|m| m.mode.kind == ModeKind::Challenge) {
            let Some(series) = m.convergence().transpose()? else {
                continue;
            };
            let worsenings = series.series().map(count_worsenings);
            convergence.push(ConvergenceRow {
                session_id: s.session_id.clone(),
                level: m.mode.level.unwrap_or(0),
                series,
                worsenings,
            });
        }
    }

    let mut tests = Vec::new();
    let groups: Vec<&[f64]> = ModeKind::ALL.iter().map(|k| pooled[k].as_slice()).collect();
    tests.push(NamedTest {
        name: "kruskal_wallis".into(),
        groups: "creatures|challenge|openplay".into(),
        result: kruskal_wallis(&groups),
    });
    for (a, b) in PAIRS {
        tests.push(NamedTest {
            name: format!("mann_whitney_{a}_{b}"),
            groups: format!("{a}|{b}"),
            result: mann_whitney_u(&pooled[&a], &pooled[&b]),
        });
    }
    let rating = |q: QuestionId| -> Vec<f64> {
        sessions.iter().map(|s| f64::from(s.survey[&q])).collect()
    };
    tests.push(NamedTest {
        name: "paired_t_control".into(),
        groups: "control_start|control_end".into(),
        result: paired_t_test(&rating(QuestionId::ControlStart), &rating(QuestionId::ControlEnd)),
    });

    let survey = QuestionId::ALL
        .iter()
        .map(|&q| Ok((q, descriptives(&rating(q))?)))
        .collect::<Result<Vec<_>, StatsError>>()?;

    Ok(StudyReport {
        session_ids: sessions.iter().map(|s| s.session_id.clone()).collect(),
        generation_counts,
        step_sizes: pooled,
        thresholds: thresholds.to_vec(),
        cdf,
        convergence,
        tests,
        survey,
    })
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

/// Writes `table_1..6.csv` and `figure_1..2.svg` into `dir`.
pub fn write_report(report: &StudyReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut table = |k: usize, header: &[&str], rows: Vec<Vec<String>>| -> io::Result<()> {
        let path = dir.join(format!("table_{k}.csv"));
        write_table(&path, header, &rows)?;
        written.push(path);
        Ok(())
    };

    table(
        1,
        &["mode", "n_sessions", "mean", "sd", "mode_value", "total"],
        report
            .generation_counts
            .iter()
            .map(|g| {
                vec![
                    g.mode.to_string(),
                    g.summary.n.to_string(),
                    g.summary.mean.to_string(),
                    opt_f64(g.summary.sd),
                    g.summary.mode.to_string(),
                    g.per_session.iter().sum::<u64>().to_string(),
                ]
            })
            .collect(),
    )?;

    table(
        2,
        &["threshold", "creatures", "challenge", "openplay"],
        report
            .thresholds
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut row = vec![format!("{t:.2}")];
                row.extend(ModeKind::ALL.iter().map(|k| report.cdf[k][i].to_string()));
                row
            })
            .collect(),
    )?;

    let mut rows = Vec::new();
    for c in &report.convergence {
        match &c.series {
            Convergence::Series(s) => {
                for (i, d) in s.iter().enumerate() {
                    rows.push(vec![
                        c.session_id.clone(),
                        c.level.to_string(),
                        "true".into(),
                        (i + 1).to_string(),
                        format!("{d:.2}"),
                    ]);
                }
            }
            Convergence::Incomparable => rows.push(vec![
                c.session_id.clone(),
                c.level.to_string(),
                "false".into(),
                String::new(),
                String::new(),
            ]),
        }
    }
    table(3, &["session_id", "level", "comparable", "generation", "distance"], rows)?;

    table(
        4,
        &[
            "session_id",
            "level",
            "comparable",
            "generations",
            "final_distance",
            "worsenings_total",
            "max_consecutive_worsenings",
        ],
        report
            .convergence
            .iter()
            .map(|c| {
                let s = c.series.series();
                vec![
                    c.session_id.clone(),
                    c.level.to_string(),
                    s.is_some().to_string(),
                    s.map(|s| s.len().to_string()).unwrap_or_default(),
                    s.and_then(|s| s.last()).map(|d| format!("{d:.2}")).unwrap_or_default(),
                    c.worsenings.map(|w| w.total.to_string()).unwrap_or_default(),
                    c.worsenings.map(|w| w.max_consecutive.to_string()).unwrap_or_default(),
                ]
            })
            .collect(),
    )?;

    table(
        5,
        &[
            "test",
            "groups",
            "statistic_name",
            "statistic",
            "df",
            "z",
            "p_value",
            "p_method",
            "effect_name",
            "effect",
            "direction",
            "n",
            "note",
        ],
        report
            .tests
            .iter()
            .map(|t| match &t.result {
                Ok(r) => vec![
                    t.name.clone(),
                    t.groups.clone(),
                    r.statistic_name.to_string(),
                    r.statistic.to_string(),
                    opt_f64(r.df),
                    opt_f64(r.z),
                    r.p_value.to_string(),
                    r.p_method.to_string(),
                    r.effect_name.to_string(),
                    r.effect.to_string(),
                    r.direction.to_string(),
                    r.n.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
                    if r.degenerate { "degenerate".into() } else { String::new() },
                ],
                Err(e) => {
                    let mut row = vec![t.name.clone(), t.groups.clone()];
                    row.extend(std::iter::repeat_n(String::new(), 10));
                    row.push(e.to_string());
                    row
                }
            })
            .collect(),
    )?;

    table(
        6,
        &["question_id", "n", "mean", "sd", "mode"],
        report
            .survey
            .iter()
            .map(|(q, d)| {
                vec![
                    q.as_str().to_owned(),
                    d.n.to_string(),
                    d.mean.to_string(),
                    opt_f64(d.sd),
                    d.mode.to_string(),
                ]
            })
            .collect(),
    )?;

    let figure_1 = dir.join("figure_1.svg");
    fs::write(&figure_1, convergence_svg(report))?;
    written.push(figure_1);
    let figure_2 = dir.join("figure_2.svg");
    fs::write(&figure_2, cdf_svg(report))?;
    written.push(figure_2);
    Ok(written)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

struct Plot {
    width: f64,
    height: f64,
    margin: f64,
    x_max: f64,
    y_max: f64,
}

impl Plot {
    fn x(&self, v: f64) -> f64 {
        self.margin + v / self.x_max * (self.width - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        self.height - self.margin - v / self.y_max * (self.height - 2.0 * self.margin)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let (w, h, m) = (self.width, self.height, self.margin);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
        let _ = writeln!(
            s,
            r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            h - m,
            w - m,
            h - m
        );
        let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
            w / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{y_label}</text>"#,
            h / 2.0,
            h / 2.0
        );
        for i in 0..=4 {
            let fx = self.x_max * f64::from(i) / 4.0;
            let fy = self.y_max * f64::from(i) / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.2}</text>"#,
                self.x(fx),
                h - m + 15.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#,
                m - 5.0,
                self.y(fy) + 4.0
            );
        }
        s
    }

    fn polyline(&self, s: &mut String, points: &[(f64, f64)], colour: &str) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.x(x), self.y(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
}

/// Challenge distance against generation index, one line per comparable
/// session and level.
pub fn convergence_svg(report: &StudyReport) -> String {
    let series: Vec<(&ConvergenceRow, &[f64])> = report
        .convergence
        .iter()
        .filter_map(|c| c.series.series().map(|s| (c, s)))
        .collect();
    let x_max = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(1) as f64;
    let y_max = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .fold(0.0, f64::max)
        .max(0.05);
    let plot = Plot {
        width: 640.0,
        height: 400.0,
        margin: 50.0,
        x_max,
        y_max,
    };
    let mut s = plot.open("Distance to target per generation", "generation", "L1 distance");
    for (i, (c, values)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .map(|(k, &d)| ((k + 1) as f64, d))
            .collect();
        let _ = writeln!(s, "<!-- {} level {} -->", c.session_id, c.level);
        plot.polyline(&mut s, &pts, PALETTE[i % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

/// Cumulative fraction of step sizes per mode.
pub fn cdf_svg(report: &StudyReport) -> String {
    let plot = Plot {
        width: 640.0,
        height: 400.0,
        margin: 50.0,
        x_max: report.thresholds.last().copied().unwrap_or(1.0).max(0.05),
        y_max: 1.0,
    };
    let mut s = plot.open("Cumulative fraction of slider changes", "step size", "fraction");
    for (i, kind) in ModeKind::ALL.iter().enumerate() {
        let pts: Vec<(f64, f64)> = report
            .thresholds
            .iter()
            .zip(&report.cdf[kind])
            .map(|(&t, &f)| (t, f))
            .collect();
        plot.polyline(&mut s, &pts, PALETTE[i]);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{kind}</text>"#,
            plot.width - plot.margin - 80.0,
            plot.margin + 15.0 * i as f64,
            PALETTE[i]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Human-readable summary for the terminal.
pub fn summary(report: &StudyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sessions: {}", report.session_ids.len());
    let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>12}", "mode", "gen mean", "gen sd", "cdf@0.20");
    for g in &report.generation_counts {
        let _ = writeln!(
            s,
            "{:<10} {:>10.2} {:>10} {:>12}",
            g.mode.as_str(),
            g.summary.mean,
            g.summary.sd.map_or("-".into(), |v| format!("{v:.2}")),
            report
                .cdf_at(g.mode, 0.2)
                .map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    let _ = writeln!(s, "{:<36} {:>12} {:>14} {:>10}", "test", "statistic", "p", "effect");
    for t in &report.tests {
        match &t.result {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    "{:<36} {:>12.4} {:>14.4e} {:>10.3}",
                    t.name, r.statistic, r.p_value, r.effect
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{:<36} {e}", t.name);
            }
        }
    }
    for (q, d) in &report.survey {
        let _ = writeln!(s, "survey {:<14} mean {:.3} mode {}", q.as_str(), d.mean, d.mode);
    }
    s
}
