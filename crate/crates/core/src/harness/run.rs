use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::load_sequence;
use super::scene::generate_scene;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::geometry::RigidPose;
use crate::io::{save_label_grid, save_semantic_grid};
use crate::splatter::{splat, LabelGrid, VoxelGridSpec};
use crate::temporal::{
    init_gaussians, memory_report, run_sequence, FrameInput, MemoryReport, ModelWeights, SequenceOutput,
};
use crate::verification::{ConfusionAccumulator, MetricsRecord};

/// File listing everything a subcommand wrote to its output directory.
pub const INDEX_FILE: &str = "index.json";

/// Runs `f` on a pool of `workers` threads, or one per core when zero.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Pipeline output for a whole sequence plus metrics where ground truth exists.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub sequence: SequenceOutput,
    pub metrics: Option<Vec<MetricsRecord>>,
}

/// Generates (or loads) the frames, builds the seeded model and runs the sequence.
pub fn execute_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (frames, truth): (Vec<FrameInput>, Option<Vec<LabelGrid>>) = match &cfg.manifest {
        Some(path) => {
            let mut loaded = load_sequence(path)?;
            loaded.frames.truncate(cfg.frames);
            if let Some(gt) = &mut loaded.ground_truth {
                gt.truncate(cfg.frames);
            }
            (loaded.frames, loaded.ground_truth)
        }
        None => {
            let generated = generate_scene(cfg, cfg.seed)?;
            (generated.frames, Some(generated.ground_truth))
        }
    };
    let spec = cfg.grid_spec()?;
    let model = ModelWeights::random(&cfg.model_shape(), &spec, cfg.seed);
    let pipeline = cfg.pipeline()?;
    let sequence = with_workers(cfg.workers, || run_sequence(&frames, &model, &pipeline))??;
    let metrics = truth
        .map(|gt| {
            sequence
                .frames
                .iter()
                .zip(&gt)
                .map(|(f, g)| {
                    let mut acc = ConfusionAccumulator::new(cfg.num_classes);
                    acc.add(&f.output.grid.classify(cfg.tau_occ), g)?;
                    Ok(MetricsRecord::from_accumulator(
                        &acc,
                        f.output.gaussians.len(),
                        sequence.memory.ratio,
                        f.wall_time_ms,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(RunOutcome {
        config: cfg.clone(),
        sequence,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub timestamp: u64,
    pub gaussian_count: usize,
    /// Semantic grid, with a `.json` sidecar.
    pub grid: String,
    /// Classified labels, with a `.json` sidecar.
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_iou: Option<f64>,
}

/// Contents of `index.json` after `run`. Holds no timings, so identical runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub command: String,
    pub config: RunConfig,
    pub memory: MemoryReport,
    pub frames: Vec<FrameEntry>,
    /// Per-frame metric records including wall time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
}

pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<RunIndex> {
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(outcome.sequence.frames.len());
    for (t, f) in outcome.sequence.frames.iter().enumerate() {
        let grid = format!("frame{t:03}.grid");
        let labels = format!("frame{t:03}.labels");
        save_semantic_grid(&f.output.grid, &dir.join(&grid))?;
        save_label_grid(&f.output.grid.classify(outcome.config.tau_occ), &dir.join(&labels))?;
        let m = outcome.metrics.as_ref().map(|m| &m[t]);
        frames.push(FrameEntry {
            timestamp: f.output.gaussians.timestamp,
            gaussian_count: f.output.gaussians.len(),
            grid,
            labels,
            miou: m.map(|m| m.miou),
            sc_iou: m.map(|m| m.sc_iou),
        });
    }
    let metrics = match &outcome.metrics {
        Some(m) => {
            fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(m)?)?;
            Some("metrics.json".to_string())
        }
        None => None,
    };
    let index = RunIndex {
        command: "run".into(),
        config: outcome.config.clone(),
        memory: outcome.sequence.memory,
        frames,
        metrics,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// One row of the `bench` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub num_gaussians: usize,
    pub grid_dims: [usize; 3],
    pub splat_ms: f64,
    pub memory: MemoryReport,
}

/// Times one splat of `p` seeded Gaussians for every `(p, grid)` pair and
/// reports storage against the dense grid.
pub fn bench_table(cfg: &RunConfig, counts: &[usize], grids: &[[usize; 3]], timed: bool) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(counts.len() * grids.len());
    let opts = cfg.splat_options();
    for &dims in grids {
        let spec = VoxelGridSpec::centered(cfg.grid.voxel_size, dims)?;
        for &p in counts {
            let splat_ms = if timed {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut gaussians = init_gaussians(&spec, p, cfg.num_classes, &mut rng);
                for g in &mut gaussians {
                    g.logits.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0));
                }
                let set = GaussianSet::new(gaussians, cfg.num_classes, 0, RigidPose::IDENTITY)?;
                let start = Instant::now();
                let grid = with_workers(cfg.workers, || splat(&set, &spec, &opts))?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                drop(grid);
                ms
            } else {
                0.0
            };
            rows.push(BenchRow {
                num_gaussians: p,
                grid_dims: dims,
                splat_ms,
                memory: memory_report(p, cfg.num_classes, dims),
            });
        }
    }
    Ok(rows)
}
