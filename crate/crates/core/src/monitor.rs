//! Runtime pipeline: scores every frame with both monitors, thresholds the
//! deviations into instantaneous flags, and turns flags into a trigger
//! when at least `k` of the last `n` are set.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfam::{cfam_deviation, CfamParams};
use crate::dataio::{Episode, LinkedPair, WINDOW_CONTEXT};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::ActionGrid;
use crate::scalar::Scalar;
use crate::sfam::{dissimilarity_profile, sfam_deviation, SfamModel};

pub const REPORT_HEADER: &str = "t,cfam_dev,sfam_dev,cfam_flag,sfam_flag,cfam_trigger,sfam_trigger";

/// First record with an SFAM score: the prediction of `x_4` needs `x_0..x_3`.
pub const SFAM_FIRST_ROW: usize = WINDOW_CONTEXT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub cfam_checkpoint: Option<PathBuf>,
    pub sfam_checkpoint: Option<PathBuf>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    pub tau_cfam: f64,
    pub tau_sfam: f64,
    pub k: usize,
    pub n: usize,
    /// Resample frames to the predictor's input size instead of rejecting
    /// them. The controller model always squares its input.
    pub resize: bool,
    /// Frames after a labelled span that still count toward detecting it.
    pub detection_slack: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            cfam_checkpoint: None,
            sfam_checkpoint: None,
            grid_lo: -0.3,
            grid_hi: 0.3,
            grid_n: 15,
            tau_cfam: f64::INFINITY,
            tau_sfam: f64::INFINITY,
            k: 3,
            n: 5,
            resize: false,
            detection_slack: 5,
        }
    }
}

impl MonitorConfig {
    pub fn grid(&self) -> Result<ActionGrid> {
        ActionGrid::new(self.grid_lo, self.grid_hi, self.grid_n)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MonitorConfig = toml::from_str(text).map_err(|e| Error::config(format!("monitor config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// TOML form; infinite (uncalibrated) thresholds are written as `inf`.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("monitor config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.k == 0 || self.k > self.n {
            return Err(Error::invalid(format!("trigger rule needs 1 <= k <= n, got k={} n={}", self.k, self.n)));
        }
        if !(self.tau_cfam >= 0.0) || !(self.tau_sfam >= 0.0) {
            return Err(Error::invalid("thresholds must be non-negative"));
        }
        Ok(())
    }
}

/// Sliding `k`-of-`n` rule over a flag stream; keeps only `n` bits.
#[derive(Clone, Debug)]
pub struct TriggerWindow {
    k: usize,
    n: usize,
    bits: VecDeque<bool>,
    count: usize,
}

impl TriggerWindow {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::invalid(format!("trigger rule needs 1 <= k <= n, got k={k} n={n}")));
        }
        Ok(TriggerWindow {
            k,
            n,
            bits: VecDeque::with_capacity(n),
            count: 0,
        })
    }

    /// Adds a flag and returns whether the trigger is active.
    pub fn push(&mut self, flag: bool) -> bool {
        if self.bits.len() == self.n && self.bits.pop_front() == Some(true) {
            self.count -= 1;
        }
        self.bits.push_back(flag);
        self.count += flag as usize;
        self.count >= self.k
    }
}

/// Trigger signal of a whole flag sequence.
pub fn triggers(flags: &[bool], k: usize, n: usize) -> Result<Vec<bool>> {
    let mut w = TriggerWindow::new(k, n)?;
    Ok(flags.iter().map(|&f| w.push(f)).collect())
}

/// One row of a monitor report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub t: usize,
    pub cfam_dev: Option<f64>,
    pub sfam_dev: Option<f64>,
    pub cfam_flag: Option<bool>,
    pub sfam_flag: Option<bool>,
    pub cfam_trigger: bool,
    pub sfam_trigger: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonitorReport {
    pub rows: Vec<ReportRow>,
}

/// Which monitor a statistic refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Cfam,
    Sfam,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Cfam => "cfam",
            Which::Sfam => "sfam",
        }
    }
}

impl MonitorReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn deviations(&self, which: Which) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match which {
                Which::Cfam => r.cfam_dev,
                Which::Sfam => r.sfam_dev,
            })
            .collect()
    }

    pub fn flags(&self, which: Which) -> Vec<Option<bool>> {
        self.rows
            .iter()
            .map(|r| match which {
                Which::Cfam => r.cfam_flag,
                Which::Sfam => r.sfam_flag,
            })
            .collect()
    }

    pub fn trigger_signal(&self, which: Which) -> Vec<bool> {
        self.rows
            .iter()
            .map(|r| match which {
                Which::Cfam => r.cfam_trigger,
                Which::Sfam => r.sfam_trigger,
            })
            .collect()
    }

    /// Builds flags and triggers from raw deviations.
    pub fn from_deviations(cfam: &[Option<f64>], sfam: &[Option<f64>], config: &MonitorConfig) -> Result<Self> {
        if cfam.len() != sfam.len() {
            return Err(Error::invalid("deviation streams differ in length"));
        }
        let mut rows = Vec::with_capacity(cfam.len());
        let mut wc = TriggerWindow::new(config.k, config.n)?;
        let mut ws = TriggerWindow::new(config.k, config.n)?;
        for (t, (&c, &s)) in cfam.iter().zip(sfam).enumerate() {
            let cfam_flag = c.map(|d| d > config.tau_cfam);
            let sfam_flag = s.map(|d| d > config.tau_sfam);
            rows.push(ReportRow {
                t,
                cfam_dev: c,
                sfam_dev: s,
                cfam_flag,
                sfam_flag,
                cfam_trigger: cfam_flag.is_some_and(|f| wc.push(f)),
                sfam_trigger: sfam_flag.is_some_and(|f| ws.push(f)),
            });
        }
        Ok(MonitorReport { rows })
    }

    /// Same deviations re-thresholded under another config.
    pub fn rethreshold(&self, config: &MonitorConfig) -> Result<Self> {
        let c: Vec<Option<f64>> = self.rows.iter().map(|r| r.cfam_dev).collect();
        let s: Vec<Option<f64>> = self.rows.iter().map(|r| r.sfam_dev).collect();
        Self::from_deviations(&c, &s, config)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        let num = |v: Option<f64>| v.map(|d| format!("{d}")).unwrap_or_default();
        let bit = |v: Option<bool>| v.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                num(r.cfam_dev),
                num(r.sfam_dev),
                bit(r.cfam_flag),
                bit(r.sfam_flag),
                r.cfam_trigger as u8,
                r.sfam_trigger as u8
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let header = rdr
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != REPORT_HEADER {
            return Err(Error::format(path, format!("header {header:?}, expected {REPORT_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let bad = |what: &str| Error::format(path, format!("row {i}: bad {what}"));
            let opt_num = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(what))
                }
            };
            let opt_bit = |s: &str, what: &str| -> Result<Option<bool>> {
                match s {
                    "" => Ok(None),
                    "0" => Ok(Some(false)),
                    "1" => Ok(Some(true)),
                    _ => Err(bad(what)),
                }
            };
            rows.push(ReportRow {
                t: rec[0].parse().map_err(|_| bad("t"))?,
                cfam_dev: opt_num(&rec[1], "cfam_dev")?,
                sfam_dev: opt_num(&rec[2], "sfam_dev")?,
                cfam_flag: opt_bit(&rec[3], "cfam_flag")?,
                sfam_flag: opt_bit(&rec[4], "sfam_flag")?,
                cfam_trigger: opt_bit(&rec[5], "cfam_trigger")?.ok_or_else(|| bad("cfam_trigger"))?,
                sfam_trigger: opt_bit(&rec[6], "sfam_trigger")?.ok_or_else(|| bad("sfam_trigger"))?,
            });
        }
        Ok(MonitorReport { rows })
    }
}

/// Frames and commands each monitor consumes.
#[derive(Clone, Copy, Debug)]
pub struct MonitorInput<'a> {
    pub cfam_frames: &'a Episode,
    pub cfam_commands: &'a Episode,
    pub sfam_frames: &'a Episode,
    pub sfam_commands: &'a Episode,
}

impl<'a> MonitorInput<'a> {
    pub fn single(ep: &'a Episode) -> Self {
        MonitorInput {
            cfam_frames: ep,
            cfam_commands: ep,
            sfam_frames: ep,
            sfam_commands: ep,
        }
    }

    /// Controller check on nominal frames with executed commands; prediction
    /// check on executed frames with nominal commands.
    pub fn linked(pair: &'a LinkedPair) -> Self {
        MonitorInput {
            cfam_frames: &pair.nominal,
            cfam_commands: &pair.executed,
            sfam_frames: &pair.executed,
            sfam_commands: &pair.nominal,
        }
    }

    pub fn len(&self) -> usize {
        self.cfam_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trained models plus monitor settings.
pub struct Monitor<'m, T: Scalar> {
    pub cfam: &'m CfamParams<T>,
    pub sfam: &'m SfamModel<T>,
    pub config: MonitorConfig,
    grid: ActionGrid,
}

const CFAM_CHUNK: usize = 32;
const SFAM_CHUNK: usize = 8;

impl<'m, T: Scalar> Monitor<'m, T> {
    pub fn new(cfam: &'m CfamParams<T>, sfam: &'m SfamModel<T>, config: MonitorConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        Ok(Monitor {
            cfam,
            sfam,
            config,
            grid,
        })
    }

    pub fn grid(&self) -> &ActionGrid {
        &self.grid
    }

    fn fit(&self, f: &Frame<f32>, h: usize, w: usize) -> Result<Frame<f32>> {
        if (f.height(), f.width()) == (h, w) {
            Ok(f.clone())
        } else if self.config.resize {
            f.resize(h, w)
        } else {
            Err(Error::invalid(format!(
                "frame is {}x{}, model expects {h}x{w}; enable resizing to adapt",
                f.height(),
                f.width()
            )))
        }
    }

    /// CFAM deviations of every record.
    pub fn cfam_deviations(&self, frames: &Episode, commands: &Episode) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(frames.len());
        for start in (0..frames.len()).step_by(CFAM_CHUNK) {
            let end = (start + CFAM_CHUNK).min(frames.len());
            let fitted = (start..end).map(|t| self.cfam.prepare(frames.frame(t))).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Frame<f32>> = fitted.iter().collect();
            for (t, prof) in (start..end).zip(self.cfam.energy_sweeps(&refs, &self.grid)?) {
                out.push(cfam_deviation(commands.steering(t), &prof));
            }
        }
        Ok(out)
    }

    /// SFAM deviations for records `SFAM_FIRST_ROW..len`; entry `j` scores
    /// the prediction of `x_j` under each candidate against `u_j`.
    pub fn sfam_deviations(&self, frames: &Episode, commands: &Episode) -> Result<Vec<Option<f64>>> {
        let (h, w) = (self.sfam.config().height, self.sfam.config().width);
        let len = frames.len();
        let fitted = (0..len).map(|t| self.fit(frames.frame(t), h, w)).collect::<Result<Vec<_>>>()?;
        let mut out = vec![None; len.min(SFAM_FIRST_ROW)];
        let rows: Vec<usize> = (SFAM_FIRST_ROW..len).collect();
        let kernel = self.sfam.config().ssim_kernel;
        for chunk in rows.chunks(SFAM_CHUNK) {
            let items: Vec<_> = chunk
                .iter()
                .map(|&j| {
                    (
                        [&fitted[j - 4], &fitted[j - 3], &fitted[j - 2], &fitted[j - 1]],
                        [commands.steering(j - 3), commands.steering(j - 2), commands.steering(j - 1)],
                    )
                })
                .collect();
            let preds = self.sfam.conditioned_predictions_many(&items, &self.grid)?;
            for (&j, p) in chunk.iter().zip(preds) {
                let prof = dissimilarity_profile(&p, &fitted[j], &self.grid, kernel)?;
                out.push(Some(sfam_deviation(&prof, commands.steering(j))));
            }
        }
        Ok(out)
    }

    pub fn run(&self, input: MonitorInput<'_>) -> Result<MonitorReport> {
        let n = input.len();
        if [input.cfam_commands.len(), input.sfam_frames.len(), input.sfam_commands.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::invalid("monitor inputs differ in length"));
        }
        let cfam: Vec<Option<f64>> = self
            .cfam_deviations(input.cfam_frames, input.cfam_commands)?
            .into_iter()
            .map(Some)
            .collect();
        let sfam = self.sfam_deviations(input.sfam_frames, input.sfam_commands)?;
        MonitorReport::from_deviations(&cfam, &sfam, &self.config)
    }

    /// Incremental form of [`Monitor::run`] holding only the last few frames.
    pub fn stream(&self) -> Result<MonitorStream<'_, 'm, T>> {
        Ok(MonitorStream {
            monitor: self,
            history: VecDeque::with_capacity(WINDOW_CONTEXT),
            cfam_window: TriggerWindow::new(self.config.k, self.config.n)?,
            sfam_window: TriggerWindow::new(self.config.k, self.config.n)?,
            t: 0,
        })
    }
}

/// Live monitor state: the last four SFAM frames with their commands and
/// two trigger windows.
pub struct MonitorStream<'a, 'm, T: Scalar> {
    monitor: &'a Monitor<'m, T>,
    history: VecDeque<(Frame<f32>, f64)>,
    cfam_window: TriggerWindow,
    sfam_window: TriggerWindow,
    t: usize,
}

impl<T: Scalar> MonitorStream<'_, '_, T> {
    /// Scores the next record. The CFAM pair and the SFAM pair coincide
    /// unless the stream replays a linked pair.
    pub fn push(&mut self, cfam_frame: &Frame<f32>, cfam_u: f64, sfam_frame: &Frame<f32>, sfam_u: f64) -> Result<ReportRow> {
        let m = self.monitor;
        let cf = m.cfam.prepare(cfam_frame)?;
        let prof = m.cfam.energy_sweep(&cf, &m.grid)?;
        let cfam_dev = cfam_deviation(cfam_u, &prof);
        let (h, w) = (m.sfam.config().height, m.sfam.config().width);
        let sf = m.fit(sfam_frame, h, w)?;
        let sfam_dev = if self.history.len() == WINDOW_CONTEXT {
            let frames: Vec<&Frame<f32>> = self.history.iter().map(|(f, _)| f).collect();
            let commands: Vec<f64> = self.history.iter().skip(1).map(|(_, u)| *u).collect();
            let preds = m.sfam.conditioned_predictions(&frames, &commands, &m.grid)?;
            let prof = dissimilarity_profile(&preds, &sf, &m.grid, m.sfam.config().ssim_kernel)?;
            Some(sfam_deviation(&prof, sfam_u))
        } else {
            None
        };
        if self.history.len() == WINDOW_CONTEXT {
            self.history.pop_front();
        }
        self.history.push_back((sf, sfam_u));
        let cfam_flag = cfam_dev > m.config.tau_cfam;
        let sfam_flag = sfam_dev.map(|d| d > m.config.tau_sfam);
        let row = ReportRow {
            t: self.t,
            cfam_dev: Some(cfam_dev),
            sfam_dev,
            cfam_flag: Some(cfam_flag),
            sfam_flag,
            cfam_trigger: self.cfam_window.push(cfam_flag),
            sfam_trigger: sfam_flag.is_some_and(|f| self.sfam_window.push(f)),
        };
        self.t += 1;
        Ok(row)
    }
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("empty calibration pool"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid(format!("percentile {percentile} outside (0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((percentile / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// Minimum pooled deviations per monitor for calibration.
pub const MIN_CALIBRATION_FRAMES: usize = 100;

/// Per-monitor thresholds at `percentile` of pooled nominal deviations.
pub fn calibrate_threshold(reports: &[MonitorReport], percentile: f64) -> Result<(f64, f64)> {
    let pool = |w: Which| -> Result<f64> {
        let all: Vec<f64> = reports.iter().flat_map(|r| r.deviations(w)).collect();
        if all.len() < MIN_CALIBRATION_FRAMES {
            return Err(Error::invalid(format!(
                "{} calibration pool has {} scored frames, need {MIN_CALIBRATION_FRAMES}",
                w.name(),
                all.len()
            )));
        }
        nearest_rank(&all, percentile)
    };
    Ok((pool(Which::Cfam)?, pool(Which::Sfam)?))
}

/// Frame- and span-level statistics of one monitor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorMetrics {
    pub scored: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Triggered frames outside labelled spans.
    pub false_triggers: usize,
    pub spans: usize,
    pub spans_detected: usize,
    /// Frames from span onset to first trigger, per detected span.
    pub latencies: Vec<usize>,
}

impl MonitorMetrics {
    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// Flagged fraction of scored nominal frames.
    pub fn false_flag_rate(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    pub fn false_trigger_rate(&self) -> f64 {
        Self::ratio(self.false_triggers, self.fp + self.tn)
    }

    pub fn detection_rate(&self) -> f64 {
        Self::ratio(self.spans_detected, self.spans)
    }

    pub fn mean_latency(&self) -> f64 {
        Self::ratio(self.latencies.iter().sum(), self.latencies.len())
    }

    pub fn median_latency(&self) -> f64 {
        if self.latencies.is_empty() {
            return f64::NAN;
        }
        let mut l = self.latencies.clone();
        l.sort_unstable();
        let m = l.len() / 2;
        if l.len() % 2 == 1 {
            l[m] as f64
        } else {
            (l[m - 1] + l[m]) as f64 / 2.0
        }
    }

    pub fn merge(&mut self, other: &MonitorMetrics) {
        self.scored += other.scored;
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.false_triggers += other.false_triggers;
        self.spans += other.spans;
        self.spans_detected += other.spans_detected;
        self.latencies.extend_from_slice(&other.latencies);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub cfam: MonitorMetrics,
    pub sfam: MonitorMetrics,
}

fn spans(labels: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().chain(std::iter::once(&false)).enumerate() {
        match (l, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn evaluate_one(flags: &[Option<bool>], trig: &[bool], labels: &[bool], slack: usize) -> MonitorMetrics {
    let mut m = MonitorMetrics::default();
    for ((f, &tr), &l) in flags.iter().zip(trig).zip(labels) {
        let Some(f) = *f else { continue };
        m.scored += 1;
        match (f, l) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
        if tr && !l {
            m.false_triggers += 1;
        }
    }
    for (s, e) in spans(labels) {
        m.spans += 1;
        let end = (e + slack).min(trig.len());
        if let Some(first) = (s..end).find(|&i| trig[i]) {
            m.spans_detected += 1;
            m.latencies.push(first - s);
        }
    }
    m
}

/// Compares a report against the episode's labels.
pub fn evaluate(report: &MonitorReport, labels: &[bool], config: &MonitorConfig) -> Result<Metrics> {
    if labels.len() != report.len() {
        return Err(Error::invalid(format!(
            "report has {} rows, labels {}",
            report.len(),
            labels.len()
        )));
    }
    Ok(Metrics {
        episodes: 1,
        cfam: evaluate_one(&report.flags(Which::Cfam), &report.trigger_signal(Which::Cfam), labels, config.detection_slack),
        sfam: evaluate_one(&report.flags(Which::Sfam), &report.trigger_signal(Which::Sfam), labels, config.detection_slack),
    })
}

/// [`evaluate`] against a labelled episode.
pub fn evaluate_episode(report: &MonitorReport, episode: &Episode, config: &MonitorConfig) -> Result<Metrics> {
    let labels = episode
        .labels()
        .ok_or_else(|| Error::invalid("episode carries no anomaly labels"))?;
    evaluate(report, &labels, config)
}

impl Metrics {
    pub fn merge(&mut self, other: &Metrics) {
        self.episodes += other.episodes;
        self.cfam.merge(&other.cfam);
        self.sfam.merge(&other.sfam);
    }

    /// Flat `key = value` text, one statistic per line.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("episodes = {}\n", self.episodes);
        for (name, m) in [("cfam", &self.cfam), ("sfam", &self.sfam)] {
            let mut kv = |k: &str, v: String| {
                let _ = writeln!(out, "{name}.{k} = {v}");
            };
            kv("scored_frames", m.scored.to_string());
            kv("true_positives", m.tp.to_string());
            kv("false_positives", m.fp.to_string());
            kv("true_negatives", m.tn.to_string());
            kv("false_negatives", m.fn_.to_string());
            kv("precision", m.precision().to_string());
            kv("recall", m.recall().to_string());
            kv("false_flag_rate", m.false_flag_rate().to_string());
            kv("false_triggers", m.false_triggers.to_string());
            kv("false_trigger_rate", m.false_trigger_rate().to_string());
            kv("spans", m.spans.to_string());
            kv("spans_detected", m.spans_detected.to_string());
            kv("detection_rate", m.detection_rate().to_string());
            kv("mean_latency", m.mean_latency().to_string());
            kv("median_latency", m.median_latency().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(flags: &[bool], k: usize, n: usize) -> Vec<bool> {
        (0..flags.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(n);
                flags[lo..=i].iter().filter(|f| **f).count() >= k
            })
            .collect()
    }

    #[test]
    fn trigger_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let k = rng.gen_range(1..=n);
            let flags: Vec<bool> = (0..rng.gen_range(0..60)).map(|_| rng.gen_bool(0.4)).collect();
            assert_eq!(triggers(&flags, k, n).unwrap(), brute(&flags, k, n));
        }
        assert!(TriggerWindow::new(0, 3).is_err());
        assert!(TriggerWindow::new(4, 3).is_err());
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 99.0).unwrap(), 99.0);
        assert_eq!(nearest_rank(&v, 100.0).unwrap(), 100.0);
        assert_eq!(nearest_rank(&v, 0.5).unwrap(), 1.0);
        assert!(nearest_rank(&[], 50.0).is_err());
    }

    #[test]
    fn calibration_bounds_flag_fraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let devs: Vec<Option<f64>> = (0..250).map(|_| Some(rng.gen::<f64>())).collect();
        let cfg = MonitorConfig::default();
        let rep = MonitorReport::from_deviations(&devs, &devs, &cfg).unwrap();
        for p in [50.0, 90.0, 99.0] {
            let (tc, _) = calibrate_threshold(std::slice::from_ref(&rep), p).unwrap();
            let flagged = devs.iter().filter(|d| d.unwrap() > tc).count();
            assert!(flagged as f64 <= (100.0 - p) / 100.0 * 250.0 + 1.0);
        }
        let short = MonitorReport::from_deviations(&devs[..50], &devs[..50], &cfg).unwrap();
        assert!(calibrate_threshold(&[short], 99.0).is_err());
    }

    #[test]
    fn perfect_report_metrics() {
        let labels: Vec<bool> = (0..30).map(|i| (10..16).contains(&i)).collect();
        let devs: Vec<Option<f64>> = labels.iter().map(|&l| Some(if l { 1.0 } else { 0.0 })).collect();
        let cfg = MonitorConfig {
            tau_cfam: 0.5,
            tau_sfam: 0.5,
            k: 1,
            n: 1,
            ..MonitorConfig::default()
        };
        let rep = MonitorReport::from_deviations(&devs, &devs, &cfg).unwrap();
        let m = evaluate(&rep, &labels, &cfg).unwrap();
        assert_eq!(m.cfam.precision(), 1.0);
        assert_eq!(m.cfam.recall(), 1.0);
        assert_eq!(m.cfam.median_latency(), 0.0);
        assert_eq!(m.sfam.detection_rate(), 1.0);

        let quiet = MonitorReport::from_deviations(&vec![Some(0.0); 30], &vec![Some(0.0); 30], &cfg).unwrap();
        let m = evaluate(&quiet, &labels, &cfg).unwrap();
        assert_eq!(m.cfam.recall(), 0.0);
        assert_eq!(m.cfam.spans_detected, 0);

        let mut one = vec![Some(0.0); 30];
        one[7] = Some(1.0);
        let rep = MonitorReport::from_deviations(&one, &one, &cfg).unwrap();
        let m = evaluate(&rep, &[false; 30], &cfg).unwrap();
        assert_eq!(m.cfam.fp, 1);
        assert_eq!(m.cfam.false_triggers, 1);
        assert!((m.cfam.false_flag_rate() - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn lowering_threshold_never_unflags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let devs: Vec<Option<f64>> = (0..100).map(|_| Some(rng.gen::<f64>())).collect();
        let mut prev: Option<Vec<Option<bool>>> = None;
        for tau in [0.9, 0.7, 0.5, 0.2, 0.0] {
            let cfg = MonitorConfig {
                tau_cfam: tau,
                tau_sfam: tau,
                ..MonitorConfig::default()
            };
            let flags = MonitorReport::from_deviations(&devs, &devs, &cfg).unwrap().flags(Which::Cfam);
            if let Some(p) = prev {
                assert!(p.iter().zip(&flags).all(|(a, b)| !a.unwrap() || b.unwrap()));
            }
            prev = Some(flags);
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = MonitorConfig {
            cfam_checkpoint: Some("models/cfam.ckpt".into()),
            tau_sfam: 0.125,
            ..MonitorConfig::default()
        };
        assert_eq!(MonitorConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert!(MonitorConfig::from_toml_str("k = 6\nn = 5\n").is_err());
        assert!(MonitorConfig::from_toml_str("tau_cfam = -1.0\n").is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let c = vec![Some(0.1), Some(0.5), Some(0.0), Some(0.25), Some(0.3), Some(0.9)];
        let mut s = vec![None; 4];
        s.extend([Some(0.2), Some(0.05)]);
        let cfg = MonitorConfig {
            tau_cfam: 0.2,
            tau_sfam: 0.1,
            k: 1,
            n: 2,
            ..MonitorConfig::default()
        };
        let rep = MonitorReport::from_deviations(&c, &s, &cfg).unwrap();
        rep.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(MonitorReport::load(&path).unwrap(), rep);
        assert!(!rep.rows[3].sfam_trigger && rep.rows[4].sfam_trigger);
    }
}
