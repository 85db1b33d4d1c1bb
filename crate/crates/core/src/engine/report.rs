use std::io::Write;

use serde::Serialize;

use crate::engine::pipeline::EpisodeReport;
use crate::engine::Toggles;
use crate::error::Result;

/// Aggregate of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub variant: String,
    pub episodes: Vec<EpisodeReport>,
    /// `(episode index, error message)` for episodes that aborted.
    pub failures: Vec<(usize, String)>,
    pub mean_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95_half_width: f64,
    pub fingerprint: String,
}

impl RunReport {
    pub fn from_episodes(variant: String, episodes: Vec<EpisodeReport>, failures: Vec<(usize, String)>, fingerprint: String) -> Self {
        let n = episodes.len();
        let mean = if n == 0 {
            0.0
        } else {
            episodes.iter().map(|e| e.accuracy).sum::<f64>() / n as f64
        };
        let half = if n < 2 {
            0.0
        } else {
            let var = episodes.iter().map(|e| (e.accuracy - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        };
        Self {
            variant,
            episodes,
            failures,
            mean_accuracy: mean,
            ci95_half_width: half,
            fingerprint,
        }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.mean_accuracy - self.ci95_half_width, self.mean_accuracy + self.ci95_half_width)
    }

    fn mean_of(&self, f: impl Fn(&EpisodeReport) -> f64) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(f).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_initial_accuracy(&self) -> f64 {
        self.mean_of(|e| e.initial_accuracy)
    }

    pub fn mean_sfa(&self) -> f64 {
        self.mean_of(|e| e.losses.sfa)
    }

    /// `(correct, total)` promotions across all episodes.
    pub fn promotion_counts(&self) -> (usize, usize) {
        self.episodes
            .iter()
            .fold((0, 0), |(c, t), e| (c + e.promoted_correct, t + e.promoted))
    }

    /// One row per episode. With `include_timing == false` the `wall_ms`
    /// column is written as 0 so that reruns are byte-identical.
    pub fn write_csv<W: Write>(&self, sink: W, include_timing: bool) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            episode_id: usize,
            accuracy: f64,
            l_cls: f64,
            l_sfa: f64,
            l_spa: f64,
            l_clm: f64,
            total: f64,
            k: usize,
            rounds: usize,
            confident_count: usize,
            wall_ms: f64,
        }
        let mut w = csv::Writer::from_writer(sink);
        for e in &self.episodes {
            w.serialize(Row {
                episode_id: e.episode_id,
                accuracy: e.accuracy,
                l_cls: e.losses.cls,
                l_sfa: e.losses.sfa,
                l_spa: e.losses.spa,
                l_clm: e.losses.clm,
                total: e.losses.total,
                k: e.k,
                rounds: e.rounds,
                confident_count: e.confident_count(),
                wall_ms: if include_timing { e.wall_ms } else { 0.0 },
            })?;
        }
        if self.episodes.is_empty() {
            w.write_record([
                "episode_id",
                "accuracy",
                "l_cls",
                "l_sfa",
                "l_spa",
                "l_clm",
                "total",
                "k",
                "rounds",
                "confident_count",
                "wall_ms",
            ])?;
        }
        w.flush().map_err(|source| crate::error::Error::Io { offset: 0, source })?;
        Ok(())
    }

    /// `key: value` summary record.
    pub fn summary(&self) -> String {
        let (lo, hi) = self.ci95();
        let (pc, pt) = self.promotion_counts();
        let mut s = String::new();
        s.push_str(&format!("variant: {}\n", self.variant));
        s.push_str(&format!("episodes: {}\n", self.episodes.len()));
        s.push_str(&format!("failures: {}\n", self.failures.len()));
        s.push_str(&format!("mean_accuracy: {:.6}\n", self.mean_accuracy));
        s.push_str(&format!("ci95_half_width: {:.6}\n", self.ci95_half_width));
        s.push_str(&format!("ci95: [{lo:.6}, {hi:.6}]\n"));
        s.push_str(&format!("mean_initial_accuracy: {:.6}\n", self.mean_initial_accuracy()));
        s.push_str(&format!("promoted_correct: {pc}/{pt}\n"));
        s.push_str(&format!("fingerprint: {}\n", self.fingerprint));
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: RunReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, t: Toggles) -> Option<&RunReport> {
        self.rows.iter().find(|r| r.toggles == t).map(|r| &r.report)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            variant: String,
            tse: bool,
            catt: bool,
            cs: bool,
            tasks: usize,
            mean_accuracy: f64,
            ci95_half_width: f64,
            mean_initial_accuracy: f64,
            fingerprint: &'a str,
        }
        let mut w = csv::Writer::from_writer(sink);
        for r in &self.rows {
            w.serialize(Row {
                variant: r.toggles.to_string(),
                tse: r.toggles.tse,
                catt: r.toggles.catt,
                cs: r.toggles.cs,
                tasks: r.report.episodes.len(),
                mean_accuracy: r.report.mean_accuracy,
                ci95_half_width: r.report.ci95_half_width,
                mean_initial_accuracy: r.report.mean_initial_accuracy(),
                fingerprint: &r.report.fingerprint,
            })?;
        }
        w.flush().map_err(|source| crate::error::Error::Io { offset: 0, source })?;
        Ok(())
    }
}
