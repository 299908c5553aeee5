//! Demonstration datasets with seen/unseen splits and their on-disk form.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{context_dim, expert_trajectory, featurize, observe, sample_task_in, ContextVector, DemoNoise, FamilyRegistry, GoalBand, TaskDescriptor, ACTION_DIM};
use crate::binio::{sha256_hex, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::rng::derive_seed;

const MANIFEST: &str = "manifest.json";
const TRAJECTORIES: &str = "trajectories.bin";
const TRAJ_MAGIC: &[u8] = b"DMTRAJ01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Families to draw tasks from; empty means every registered family.
    pub families: Vec<String>,
    /// Families whose tasks are all held out.
    pub unseen_families: Vec<String>,
    pub tasks_per_family: usize,
    /// Held-out-region tasks per seen family (goal x at or above `unseen_goal_x`).
    pub unseen_tasks_per_family: usize,
    pub demos_per_task: usize,
    /// Per seen task, demos kept out of training.
    pub validation_demos_per_task: usize,
    pub unseen_goal_x: f64,
    pub noise_std: f64,
    /// Lag-one correlation of the per-step expert noise.
    pub noise_correlation: f64,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            families: Vec::new(),
            unseen_families: vec!["loop".into()],
            tasks_per_family: 4,
            unseen_tasks_per_family: 1,
            demos_per_task: 24,
            validation_demos_per_task: 4,
            unseen_goal_x: 0.87,
            noise_std: 0.01,
            noise_correlation: 0.9,
            horizon: 8,
        }
    }
}

impl DataConfig {
    pub fn noise(&self) -> DemoNoise {
        DemoNoise {
            std: self.noise_std,
            correlation: self.noise_correlation,
        }
    }

    pub fn family_names(&self, registry: &FamilyRegistry) -> Vec<String> {
        if self.families.is_empty() {
            registry.names().into_iter().map(String::from).collect()
        } else {
            self.families.clone()
        }
    }

    pub fn validate(&self, registry: &FamilyRegistry) -> Result<()> {
        let fams = self.family_names(registry);
        if fams.len() < 2 {
            return Err(Error::Config("dataset needs at least two families".into()));
        }
        for (i, f) in fams.iter().enumerate() {
            let fam = registry.get(f)?;
            if fams[..i].contains(f) {
                return Err(Error::Config(format!("family {f} listed twice")));
            }
            if fam.episode_len() % self.horizon != 0 {
                return Err(Error::Config(format!(
                    "family {f} length {} is not a multiple of horizon {}",
                    fam.episode_len(),
                    self.horizon
                )));
            }
        }
        for f in &self.unseen_families {
            if !fams.contains(f) {
                return Err(Error::Config(format!("unseen family {f} is not in the family list")));
            }
        }
        if self.unseen_families.len() >= fams.len() {
            return Err(Error::Config("every family is held out".into()));
        }
        if self.horizon == 0 || self.tasks_per_family == 0 {
            return Err(Error::Config("horizon and tasks_per_family must be positive".into()));
        }
        if self.demos_per_task < 2 || self.validation_demos_per_task >= self.demos_per_task {
            return Err(Error::Config(format!(
                "demos_per_task={} must exceed validation_demos_per_task={} and be at least 2",
                self.demos_per_task, self.validation_demos_per_task
            )));
        }
        self.noise().check().map_err(|e| Error::Config(e.to_string()))?;
        let (lo, hi) = super::BASE_RANGES.0[2];
        if !(self.unseen_goal_x > lo && self.unseen_goal_x < hi) {
            return Err(Error::Config(format!("unseen_goal_x must lie inside ({lo}, {hi})")));
        }
        Ok(())
    }

    fn seen_band(&self) -> GoalBand {
        GoalBand {
            lo: f64::NEG_INFINITY,
            hi: self.unseen_goal_x.next_down(),
        }
    }

    fn unseen_band(&self) -> GoalBand {
        GoalBand {
            lo: self.unseen_goal_x,
            hi: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoRole {
    Train,
    Validation,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub descriptor: TaskDescriptor,
    pub split: Split,
    /// Indices into [`Dataset::demos`].
    pub demos: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub task: usize,
    pub role: DemoRole,
    pub noise_seed: u64,
    pub trajectory: ActionChunk,
    pub observations: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub master_seed: u64,
    pub suite_fingerprint: String,
    pub tasks: Vec<TaskRecord>,
    pub demos: Vec<Demonstration>,
}

/// Hash of everything a trained model depends on: family definitions, chunk
/// shape and context layout.
pub fn suite_fingerprint(registry: &FamilyRegistry, horizon: usize) -> String {
    let desc = serde_json::json!({
        "families": registry.describe(),
        "horizon": horizon,
        "action_dim": ACTION_DIM,
        "context_dim": context_dim(registry),
    });
    sha256_hex(desc.to_string().as_bytes())
}

struct TaskPlan {
    id: String,
    family: String,
    split: Split,
    band: GoalBand,
    label: String,
}

fn make_demo(registry: &FamilyRegistry, task: &TaskDescriptor, t_len: usize, noise: DemoNoise, j: usize) -> Result<(u64, ActionChunk)> {
    let seed = derive_seed(task.seed, &format!("demo/{j}"));
    Ok((seed, expert_trajectory(registry, task, t_len, noise, seed)?))
}

fn observations(task: &TaskDescriptor, traj: &ActionChunk) -> Result<Vec<Vec<f64>>> {
    traj.iter_rows().map(|r| observe(task, r)).collect()
}

/// Generate the full suite. Each task draws from its own derived seed, so the
/// result does not depend on thread scheduling.
pub fn build_dataset(registry: &FamilyRegistry, config: &DataConfig, master_seed: u64) -> Result<Dataset> {
    config.validate(registry)?;
    let mut plans = Vec::new();
    for fam in config.family_names(registry) {
        let held_out = config.unseen_families.contains(&fam);
        let short = fam.clone();
        if held_out {
            for k in 0..config.tasks_per_family {
                plans.push(TaskPlan {
                    id: format!("{short}-u{k:02}"),
                    family: fam.clone(),
                    split: Split::Unseen,
                    band: GoalBand { lo: f64::NEG_INFINITY, hi: f64::INFINITY },
                    label: format!("task/{fam}/family/{k}"),
                });
            }
            continue;
        }
        for k in 0..config.tasks_per_family {
            plans.push(TaskPlan {
                id: format!("{short}-s{k:02}"),
                family: fam.clone(),
                split: Split::Seen,
                band: config.seen_band(),
                label: format!("task/{fam}/seen/{k}"),
            });
        }
        for k in 0..config.unseen_tasks_per_family {
            plans.push(TaskPlan {
                id: format!("{short}-u{k:02}"),
                family: fam.clone(),
                split: Split::Unseen,
                band: config.unseen_band(),
                label: format!("task/{fam}/region/{k}"),
            });
        }
    }

    let generated: Vec<(TaskDescriptor, Vec<(u64, ActionChunk)>)> = plans
        .par_iter()
        .map(|p| {
            let task = sample_task_in(registry, &p.family, derive_seed(master_seed, &p.label), Some(p.band))?;
            let t_len = registry.get(&p.family)?.episode_len();
            let demos = (0..config.demos_per_task)
                .map(|j| make_demo(registry, &task, t_len, config.noise(), j))
                .collect::<Result<Vec<_>>>()?;
            Ok((task, demos))
        })
        .collect::<Result<_>>()?;

    let mut tasks = Vec::with_capacity(plans.len());
    let mut demos = Vec::new();
    for (ti, (plan, (descriptor, trajs))) in plans.into_iter().zip(generated).enumerate() {
        let mut idx = Vec::with_capacity(trajs.len());
        let n_train = config.demos_per_task - config.validation_demos_per_task;
        for (j, (noise_seed, trajectory)) in trajs.into_iter().enumerate() {
            let role = match plan.split {
                Split::Unseen => DemoRole::Unseen,
                Split::Seen if j < n_train => DemoRole::Train,
                Split::Seen => DemoRole::Validation,
            };
            idx.push(demos.len());
            demos.push(Demonstration {
                id: format!("{}/d{j:02}", plan.id),
                task: ti,
                role,
                noise_seed,
                observations: observations(&descriptor, &trajectory)?,
                trajectory,
            });
        }
        tasks.push(TaskRecord {
            id: plan.id,
            descriptor,
            split: plan.split,
            demos: idx,
        });
    }
    log::info!("generated {} tasks, {} demonstrations", tasks.len(), demos.len());
    Ok(Dataset {
        config: config.clone(),
        master_seed,
        suite_fingerprint: suite_fingerprint(registry, config.horizon),
        tasks,
        demos,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestTask {
    id: String,
    family: String,
    split: Split,
    descriptor: TaskDescriptor,
    train: Vec<String>,
    validation: Vec<String>,
    unseen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    master_seed: u64,
    suite_fingerprint: String,
    dataset_fingerprint: String,
    config: DataConfig,
    demo_count: usize,
    tasks: Vec<ManifestTask>,
}

impl Dataset {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn task_of(&self, demo: &Demonstration) -> &TaskRecord {
        &self.tasks[demo.task]
    }

    pub fn demos_with_role(&self, role: DemoRole) -> impl Iterator<Item = (usize, &Demonstration)> {
        self.demos.iter().enumerate().filter(move |(_, d)| d.role == role)
    }

    /// Train-demo indices per seen task, in task order.
    pub fn train_groups(&self) -> Vec<Vec<usize>> {
        self.tasks
            .iter()
            .filter(|t| t.split == Split::Seen)
            .map(|t| t.demos.iter().copied().filter(|&i| self.demos[i].role == DemoRole::Train).collect())
            .collect()
    }

    pub fn num_chunks(&self, demo: &Demonstration) -> usize {
        demo.trajectory.rows() / self.horizon()
    }

    /// Rows `c·H .. (c+1)·H` of a demonstration.
    pub fn chunk(&self, demo: &Demonstration, c: usize) -> Result<ActionChunk> {
        let h = self.horizon();
        if c >= self.num_chunks(demo) {
            return Err(Error::invalid(format!("chunk {c} beyond demo {}", demo.id)));
        }
        let a = demo.trajectory.cols();
        ActionChunk::new(h, a, demo.trajectory.as_slice()[c * h * a..(c + 1) * h * a].to_vec())
    }

    /// Context observed just before chunk `c` is executed.
    pub fn chunk_context(&self, registry: &FamilyRegistry, demo: &Demonstration, c: usize) -> Result<ContextVector> {
        let row = if c == 0 { 0 } else { c * self.horizon() - 1 };
        let obs = demo
            .observations
            .get(row)
            .ok_or_else(|| Error::invalid(format!("chunk {c} beyond demo {}", demo.id)))?;
        featurize(registry, &self.task_of(demo).descriptor, obs)
    }

    fn trajectory_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(TRAJ_MAGIC);
        w.u64(self.master_seed);
        w.str(&self.suite_fingerprint);
        w.u64(self.demos.len() as u64);
        for d in &self.demos {
            w.str(&d.id);
            w.u64(d.noise_seed);
            w.u64(d.trajectory.rows() as u64);
            w.u32(d.trajectory.cols() as u32);
            w.f64s(d.trajectory.as_slice());
        }
        w.finish()
    }

    /// Hash of the binary trajectory store.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.trajectory_bytes())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.trajectory_bytes();
        let ids = |t: &TaskRecord, role: DemoRole| -> Vec<String> {
            t.demos.iter().filter(|&&i| self.demos[i].role == role).map(|&i| self.demos[i].id.clone()).collect()
        };
        let manifest = Manifest {
            master_seed: self.master_seed,
            suite_fingerprint: self.suite_fingerprint.clone(),
            dataset_fingerprint: sha256_hex(&bytes),
            config: self.config.clone(),
            demo_count: self.demos.len(),
            tasks: self
                .tasks
                .iter()
                .map(|t| ManifestTask {
                    id: t.id.clone(),
                    family: t.descriptor.family.clone(),
                    split: t.split,
                    descriptor: t.descriptor.clone(),
                    train: ids(t, DemoRole::Train),
                    validation: ids(t, DemoRole::Validation),
                    unseen: ids(t, DemoRole::Unseen),
                })
                .collect(),
        };
        std::fs::write(dir.join(TRAJECTORIES), &bytes)?;
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, registry: &FamilyRegistry) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let tpath = dir.join(TRAJECTORIES);
        for p in [&mpath, &tpath] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
        let bytes = std::fs::read(&tpath)?;
        let actual = sha256_hex(&bytes);
        if actual != manifest.dataset_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: manifest.dataset_fingerprint,
                actual,
            });
        }
        let suite = suite_fingerprint(registry, manifest.config.horizon);
        if suite != manifest.suite_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: manifest.suite_fingerprint,
                actual: suite,
            });
        }

        let mut r = ByteReader::verified("trajectory store", &bytes)?;
        r.expect(TRAJ_MAGIC)?;
        let seed = r.u64()?;
        let fp = r.str()?;
        if seed != manifest.master_seed || fp != manifest.suite_fingerprint {
            return Err(Error::corrupt("trajectory store", "header disagrees with manifest"));
        }
        let n = r.u64()? as usize;
        if n != manifest.demo_count {
            return Err(Error::corrupt("trajectory store", "demo count disagrees with manifest"));
        }
        let mut raw = std::collections::HashMap::with_capacity(n);
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.str()?;
            let noise_seed = r.u64()?;
            let rows = r.u64()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f64s(rows.checked_mul(cols).ok_or_else(|| Error::corrupt("trajectory store", "size overflow"))?)?;
            order.push(id.clone());
            raw.insert(id, (noise_seed, ActionChunk::new(rows, cols, data)?));
        }
        r.finish()?;

        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        let mut demos = Vec::with_capacity(n);
        for (ti, mt) in manifest.tasks.into_iter().enumerate() {
            super::check_task(registry, &mt.descriptor)?;
            let mut idx = Vec::new();
            for (role, list) in [(DemoRole::Train, mt.train), (DemoRole::Validation, mt.validation), (DemoRole::Unseen, mt.unseen)] {
                for id in list {
                    let (noise_seed, trajectory) = raw
                        .remove(&id)
                        .ok_or_else(|| Error::corrupt("dataset manifest", format!("demo {id} missing or repeated")))?;
                    idx.push(demos.len());
                    demos.push(Demonstration {
                        observations: observations(&mt.descriptor, &trajectory)?,
                        id,
                        task: ti,
                        role,
                        noise_seed,
                        trajectory,
                    });
                }
            }
            tasks.push(TaskRecord {
                id: mt.id,
                descriptor: mt.descriptor,
                split: mt.split,
                demos: idx,
            });
        }
        if !raw.is_empty() {
            return Err(Error::corrupt("dataset manifest", "store holds demos the manifest does not list"));
        }
        // Restore generation order so a loaded dataset equals the generated one.
        let pos: std::collections::HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut perm: Vec<usize> = (0..demos.len()).collect();
        perm.sort_by_key(|&i| pos[demos[i].id.as_str()]);
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        for t in &mut tasks {
            for i in &mut t.demos {
                *i = inverse[*i];
            }
            t.demos.sort_unstable();
        }
        let mut slots: Vec<Option<Demonstration>> = demos.into_iter().map(Some).collect();
        let demos = perm.iter().map(|&i| slots[i].take().expect("permutation")).collect();

        Ok(Self {
            config: manifest.config,
            master_seed: manifest.master_seed,
            suite_fingerprint: manifest.suite_fingerprint,
            tasks,
            demos,
        })
    }
}
