use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Event, Result, SharedParamStore, TrainError, TrainerConfig};
use crate::subgoals::SubgoalKind;

/// One finished episode of one actor.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub actor: usize,
    pub global_step: u64,
    pub length: u64,
    pub ext_return_raw: f64,
    pub ext_return_scaled: f64,
    /// Intrinsic return per active kind.
    pub intrinsic: Vec<(SubgoalKind, f64)>,
    pub mean_entropy: f64,
    pub success: bool,
}

/// Per-step averages of one Worker update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRecord {
    pub global_step: u64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// One row per `log_interval` environment steps. Returns are means over the
/// episodes finished in the interval; losses are means over its Worker
/// updates. Empty when nothing finished or the subgoal is inactive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub global_step: u64,
    /// Episodes finished so far.
    pub episode_index: u64,
    pub ext_return_raw: Option<f64>,
    pub ext_return_scaled: Option<f64>,
    pub int_return_pc: Option<f64>,
    pub int_return_dc: Option<f64>,
    pub int_return_fc: Option<f64>,
    pub int_return_rand: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub value_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub wallclock_s: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 12] = [
        "global_step",
        "episode_index",
        "ext_return_raw",
        "ext_return_scaled",
        "int_return_pc",
        "int_return_dc",
        "int_return_fc",
        "int_return_rand",
        "policy_entropy",
        "value_loss",
        "policy_loss",
        "wallclock_s",
    ];

    pub fn intrinsic(&self, kind: SubgoalKind) -> Option<f64> {
        match kind {
            SubgoalKind::PixelControl => self.int_return_pc,
            SubgoalKind::DirectionControl => self.int_return_dc,
            SubgoalKind::FeatureControl => self.int_return_fc,
            SubgoalKind::Random => self.int_return_rand,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub global_steps: u64,
    pub episodes: u64,
    /// First step at which the trailing-window median return reached the threshold.
    pub steps_to_threshold: Option<u64>,
    /// Median scaled return over the last window of episodes.
    pub final_median_return: Option<f64>,
    pub final_mean_return: Option<f64>,
    pub updates: u64,
    pub wallclock_s: f64,
}

/// Receives the metrics stream on the collecting thread.
pub trait TrainObserver {
    fn on_episode(&mut self, _episode: &EpisodeRecord) -> std::result::Result<(), String> {
        Ok(())
    }

    fn on_row(&mut self, _row: &MetricsRow, _store: &SharedParamStore) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub rows: Vec<MetricsRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainObserver for Recorder {
    fn on_episode(&mut self, episode: &EpisodeRecord) -> std::result::Result<(), String> {
        self.episodes.push(episode.clone());
        Ok(())
    }

    fn on_row(&mut self, row: &MetricsRow, _store: &SharedParamStore) -> std::result::Result<(), String> {
        self.rows.push(row.clone());
        Ok(())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Default)]
struct Interval {
    episodes: u64,
    raw: f64,
    scaled: f64,
    intrinsic: [Option<f64>; 4],
    updates: u64,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
}

fn mean(sum: f64, n: u64) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub(crate) struct Collector {
    interval: u64,
    next_row: u64,
    window_len: usize,
    threshold: f64,
    record_wallclock: bool,
    start: Instant,
    episodes: u64,
    window: VecDeque<f64>,
    steps_to_threshold: Option<u64>,
    current: Interval,
}

impl Collector {
    pub(crate) fn new(cfg: &TrainerConfig, start: Instant) -> Self {
        Self {
            interval: cfg.log_interval,
            next_row: cfg.log_interval,
            window_len: cfg.threshold_window,
            threshold: cfg.threshold,
            record_wallclock: cfg.record_wallclock,
            start,
            episodes: 0,
            window: VecDeque::new(),
            steps_to_threshold: None,
            current: Interval::default(),
        }
    }

    pub(crate) fn steps_to_threshold(&self) -> Option<u64> {
        self.steps_to_threshold
    }

    fn emit(&mut self, store: &SharedParamStore, observer: &mut dyn TrainObserver) -> Result<()> {
        let c = std::mem::take(&mut self.current);
        let row = MetricsRow {
            global_step: self.next_row,
            episode_index: self.episodes,
            ext_return_raw: mean(c.raw, c.episodes),
            ext_return_scaled: mean(c.scaled, c.episodes),
            int_return_pc: c.intrinsic[0].and_then(|s| mean(s, c.episodes)),
            int_return_dc: c.intrinsic[1].and_then(|s| mean(s, c.episodes)),
            int_return_fc: c.intrinsic[2].and_then(|s| mean(s, c.episodes)),
            int_return_rand: c.intrinsic[3].and_then(|s| mean(s, c.episodes)),
            policy_entropy: mean(c.entropy, c.updates),
            value_loss: mean(c.value_loss, c.updates),
            policy_loss: mean(c.policy_loss, c.updates),
            wallclock_s: self.record_wallclock.then(|| self.start.elapsed().as_secs_f64()),
        };
        self.next_row += self.interval;
        observer.on_row(&row, store).map_err(TrainError::Observer)
    }

    pub(crate) fn on_event(&mut self, event: Event, store: &SharedParamStore, observer: &mut dyn TrainObserver) -> Result<()> {
        let step = match &event {
            Event::Episode(e) => e.global_step,
            Event::Update(u) => u.global_step,
        };
        while step > self.next_row {
            self.emit(store, observer)?;
        }
        match event {
            Event::Episode(e) => {
                self.episodes += 1;
                let c = &mut self.current;
                c.episodes += 1;
                c.raw += e.ext_return_raw;
                c.scaled += e.ext_return_scaled;
                for &(kind, r) in &e.intrinsic {
                    let slot = &mut c.intrinsic[kind as usize];
                    *slot = Some(slot.unwrap_or(0.0) + r);
                }
                self.window.push_back(e.ext_return_scaled);
                if self.window.len() > self.window_len {
                    self.window.pop_front();
                }
                if self.steps_to_threshold.is_none() && self.window.len() == self.window_len {
                    let v: Vec<f64> = self.window.iter().copied().collect();
                    if median(&v).is_some_and(|m| m >= self.threshold) {
                        self.steps_to_threshold = Some(e.global_step);
                    }
                }
                observer.on_episode(&e).map_err(TrainError::Observer)?;
            }
            Event::Update(u) => {
                let c = &mut self.current;
                c.updates += 1;
                c.policy_loss += u.policy_loss;
                c.value_loss += u.value_loss;
                c.entropy += u.entropy;
            }
        }
        Ok(())
    }

    pub(crate) fn finish(mut self, final_step: u64, store: &SharedParamStore, observer: &mut dyn TrainObserver) -> Result<TrainSummary> {
        while self.next_row <= final_step {
            self.emit(store, observer)?;
        }
        let v: Vec<f64> = self.window.iter().copied().collect();
        Ok(TrainSummary {
            global_steps: final_step,
            episodes: self.episodes,
            steps_to_threshold: self.steps_to_threshold,
            final_median_return: median(&v),
            final_mean_return: mean(v.iter().sum(), v.len() as u64),
            updates: store.updates_applied(),
            wallclock_s: self.start.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
