use std::path::{Path, PathBuf};

use mghl_core::agent::{ablation_set, Agent};
use mghl_core::subgoals::SubgoalKind;
use mghl_core::trainer::{
    self, median, EpisodeRecord, MetricsRow, SharedParamStore, TrainObserver, TrainSummary,
};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::metrics_io::{format_table, write_table, MetricsWriter};
use crate::svg::{line_chart, trailing_mean, Series, SMOOTHING};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "curve.svg";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Seed of actor `actor`'s agent in a run seeded with `seed`.
pub fn agent_seed(seed: u64, actor: usize) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(actor as u64)
}

struct FileObserver {
    dir: PathBuf,
    writer: MetricsWriter,
    checkpoint_interval: u64,
    checkpoints: Vec<PathBuf>,
    episodes: Vec<EpisodeRecord>,
    rows: Vec<MetricsRow>,
}

impl TrainObserver for FileObserver {
    fn on_episode(&mut self, episode: &EpisodeRecord) -> Result<(), String> {
        self.episodes.push(episode.clone());
        Ok(())
    }

    fn on_row(&mut self, row: &MetricsRow, store: &SharedParamStore) -> Result<(), String> {
        self.writer.push(row).map_err(|e| e.to_string())?;
        if row.global_step.is_multiple_of(self.checkpoint_interval) {
            let path = self.dir.join(format!("checkpoint-{:09}.ckpt", row.global_step));
            save_checkpoint(store, &path).map_err(|e| e.to_string())?;
            self.checkpoints.push(path);
        }
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Artifacts and statistics of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: TrainSummary,
    pub episodes: Vec<EpisodeRecord>,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

const RETURN_COLUMNS: [(Option<SubgoalKind>, &str); 5] = [
    (None, "ext_return_scaled"),
    (Some(SubgoalKind::PixelControl), "int_return_pc"),
    (Some(SubgoalKind::DirectionControl), "int_return_dc"),
    (Some(SubgoalKind::FeatureControl), "int_return_fc"),
    (Some(SubgoalKind::Random), "int_return_rand"),
];

/// Smoothed per-episode return curves for the return columns that carry data.
pub fn episode_series(episodes: &[EpisodeRecord]) -> Vec<Series> {
    let xs: Vec<f64> = episodes.iter().map(|e| e.global_step as f64).collect();
    let mut out = Vec::new();
    for (kind, name) in RETURN_COLUMNS {
        let ys: Option<Vec<f64>> = episodes
            .iter()
            .map(|e| match kind {
                None => Some(e.ext_return_scaled),
                Some(k) => e.intrinsic.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v),
            })
            .collect();
        let Some(ys) = ys.filter(|v| !v.is_empty()) else { continue };
        let smooth = trailing_mean(&ys, SMOOTHING);
        out.push(Series { name: name.to_string(), points: xs.iter().copied().zip(smooth).collect() });
    }
    out
}

/// Trains one seed into `dir`: metrics, periodic and final checkpoints, curve.
pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedRun, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tcfg = cfg.trainer.clone();
    tcfg.seed = seed;
    let acfg = cfg.agent_config();
    let env_cfg = cfg.env.clone();
    let mut obs = FileObserver {
        dir: dir.to_path_buf(),
        writer: MetricsWriter::create(&dir.join(METRICS_FILE))?,
        checkpoint_interval: cfg.run.checkpoint_interval,
        checkpoints: Vec::new(),
        episodes: Vec::new(),
        rows: Vec::new(),
    };
    let (summary, store) = trainer::train(
        &tcfg,
        |actor| {
            let env = env_cfg.build()?;
            Agent::for_env(acfg.clone(), env.as_ref(), agent_seed(seed, actor))
        },
        |_| env_cfg.build(),
        &mut obs,
    )?;
    let final_path = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&store, &final_path)?;
    obs.checkpoints.push(final_path);
    let title = format!("seed {seed}: {} episodes", obs.episodes.len());
    let svg = line_chart(&title, "environment steps", "return (20-episode trailing mean)", &episode_series(&obs.episodes));
    write_file(&dir.join(CURVE_FILE), &svg)?;
    Ok(SeedRun {
        seed,
        dir: dir.to_path_buf(),
        summary,
        episodes: obs.episodes,
        rows: obs.rows,
        checkpoints: obs.checkpoints,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Validates, snapshots the config into the output directory and trains
/// every seed in turn.
pub fn run_train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<SeedRun>, CliError> {
    cfg.validate()?;
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut runs = Vec::new();
    for &seed in &cfg.run.seeds {
        let run = train_seed(cfg, seed, &seed_dir(out, seed))?;
        log(&seed_line(&run));
        runs.push(run);
    }
    Ok(runs)
}

fn seed_line(run: &SeedRun) -> String {
    format!(
        "seed {}: {} steps, {} episodes, steps to threshold {}, final median return {}",
        run.seed,
        run.summary.global_steps,
        run.summary.episodes,
        fmt_steps(run.summary.steps_to_threshold),
        fmt_opt(run.summary.final_median_return),
    )
}

fn fmt_steps(v: Option<u64>) -> String {
    v.map_or_else(|| "not reached".to_string(), |s| s.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.3}"))
}

/// Median where `None` counts as larger than every value.
pub fn censored_median(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(u64::MAX));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        Some((v[n / 2 - 1]? as f64 + v[n / 2]? as f64) / 2.0)
    }
}

/// One ablation setting: a name and its subgoal set.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub name: String,
    pub subgoals: Vec<SubgoalKind>,
}

pub fn ablation_settings(robustness: bool) -> Vec<Setting> {
    let goals = if robustness { 1..=4 } else { 1..=3 };
    goals
        .map(|g| {
            let subgoals = ablation_set(g);
            let name = subgoals.iter().map(|k| k.tag()).collect::<Vec<_>>().join("+");
            Setting { name, subgoals }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SettingResult {
    pub setting: Setting,
    pub runs: Vec<SeedRun>,
}

impl SettingResult {
    pub fn steps_to_threshold(&self) -> Vec<Option<u64>> {
        self.runs.iter().map(|r| r.summary.steps_to_threshold).collect()
    }

    pub fn median_steps_to_threshold(&self) -> Option<f64> {
        censored_median(&self.steps_to_threshold())
    }

    pub fn median_final_return(&self) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.summary.final_median_return).collect();
        median(&v)
    }
}

pub const SUMMARY_HEADER: [&str; 5] = ["setting", "seeds", "reached", "median_steps_to_threshold", "median_final_return"];

pub fn summary_rows(results: &[SettingResult]) -> Vec<Vec<String>> {
    results
        .iter()
        .map(|r| {
            vec![
                r.setting.name.clone(),
                r.runs.len().to_string(),
                r.steps_to_threshold().iter().filter(|s| s.is_some()).count().to_string(),
                r.median_steps_to_threshold().map_or_else(|| "not reached".into(), |m| format!("{m}")),
                fmt_opt(r.median_final_return()),
            ]
        })
        .collect()
}

/// Per-seed smoothed return sampled on a step grid, then the median over seeds.
fn median_curve(runs: &[SeedRun], grid: &[f64]) -> Vec<(f64, f64)> {
    let curves: Vec<(Vec<f64>, Vec<f64>)> = runs
        .iter()
        .map(|r| {
            let ys: Vec<f64> = r.episodes.iter().map(|e| e.ext_return_scaled).collect();
            (r.episodes.iter().map(|e| e.global_step as f64).collect(), trailing_mean(&ys, SMOOTHING))
        })
        .collect();
    grid.iter()
        .filter_map(|&x| {
            let at: Vec<f64> = curves
                .iter()
                .filter_map(|(xs, ys)| {
                    let n = xs.partition_point(|&s| s <= x);
                    (n > 0).then(|| ys[n - 1])
                })
                .collect();
            median(&at).map(|m| (x, m))
        })
        .collect()
}

/// Runs every setting over every seed and writes per-setting curves, a
/// combined curve, and `summary.csv` / `runs.csv`.
pub fn run_ablation(cfg: &RunConfig, robustness: bool, log: &mut dyn FnMut(&str)) -> Result<Vec<SettingResult>, CliError> {
    cfg.validate()?;
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut results = Vec::new();
    for setting in ablation_settings(robustness) {
        let mut scfg = cfg.clone();
        scfg.agent.active_subgoals = setting.subgoals.clone();
        let dir = out.join(setting.name.replace('+', "-"));
        let mut runs = Vec::new();
        for &seed in &cfg.run.seeds {
            let run = train_seed(&scfg, seed, &seed_dir(&dir, seed))?;
            log(&format!("[{}] {}", setting.name, seed_line(&run)));
            runs.push(run);
        }
        let series: Vec<Series> = runs
            .iter()
            .map(|r| {
                let ys: Vec<f64> = r.episodes.iter().map(|e| e.ext_return_scaled).collect();
                let xs = r.episodes.iter().map(|e| e.global_step as f64);
                Series { name: format!("seed {}", r.seed), points: xs.zip(trailing_mean(&ys, SMOOTHING)).collect() }
            })
            .collect();
        let svg = line_chart(&setting.name, "environment steps", "extrinsic return", &series);
        write_file(&dir.join(CURVE_FILE), &svg)?;
        results.push(SettingResult { setting, runs });
    }

    let last = results
        .iter()
        .flat_map(|r| r.runs.iter().map(|s| s.summary.global_steps))
        .max()
        .unwrap_or(0);
    let step = cfg.trainer.log_interval as f64;
    let grid: Vec<f64> = (1..=(last as f64 / step).ceil() as u64).map(|i| i as f64 * step).collect();
    let combined: Vec<Series> = results
        .iter()
        .map(|r| Series { name: r.setting.name.clone(), points: median_curve(&r.runs, &grid) })
        .collect();
    let svg = line_chart("median over seeds", "environment steps", "extrinsic return", &combined);
    write_file(&out.join("combined.svg"), &svg)?;

    let rows = summary_rows(&results);
    write_table(&out.join("summary.csv"), &SUMMARY_HEADER, &rows)?;
    let per_seed: Vec<Vec<String>> = results
        .iter()
        .flat_map(|r| {
            r.runs.iter().map(|s| {
                vec![
                    r.setting.name.clone(),
                    s.seed.to_string(),
                    s.summary.steps_to_threshold.map_or_else(String::new, |v| v.to_string()),
                    fmt_opt(s.summary.final_median_return),
                    s.summary.episodes.to_string(),
                    s.summary.global_steps.to_string(),
                ]
            })
        })
        .collect();
    write_table(
        &out.join("runs.csv"),
        &["setting", "seed", "steps_to_threshold", "final_median_return", "episodes", "global_steps"],
        &per_seed,
    )?;
    log(&format_table(&SUMMARY_HEADER, &rows));
    Ok(results)
}
