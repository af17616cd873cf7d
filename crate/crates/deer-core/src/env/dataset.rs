//! Demonstration dataset generation and JSON Lines I/O.

use super::{
    expert_action, sample_world, sim::TaskEnv, Action7, Direction, EnvConfig, Episode,
    EpisodeStep, ExpertError, Instruction, Split, Template, WorldState,
};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_episodes: usize,
    pub splits: Vec<Split>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n_episodes: usize,
    /// Arithmetic mean of per-episode step counts; feeds the per-step
    /// budget derivation.
    pub mean_len: f64,
    pub seed: u64,
    pub splits: Vec<String>,
}

/// Pick an instruction the expert can solve from `state`, mutating the
/// state when the template requires setup (release starts already
/// holding an object).
fn sample_solvable_instruction(
    cfg: &EnvConfig,
    state: &mut WorldState,
    rng: &mut Rng,
) -> Instruction {
    for _ in 0..64 {
        let template = *rng.pick(&[
            Template::Reach,
            Template::Grasp,
            Template::PlaceInZone,
            Template::Release,
            Template::PushDirection,
        ]);
        let instr = match template {
            Template::Reach | Template::Grasp => {
                let obj = rng.usize_below(state.objects.len());
                Instruction::new(cfg, template, Some(state.objects[obj].color), None, None)
            }
            Template::PlaceInZone => {
                let obj = rng.usize_below(state.objects.len());
                let zone = rng.usize_below(state.zones.len());
                Instruction::new(
                    cfg,
                    template,
                    Some(state.objects[obj].color),
                    Some(zone),
                    None,
                )
            }
            Template::Release => {
                if state.held_index().is_none() {
                    // start the episode already holding a random object
                    let obj = rng.usize_below(state.objects.len());
                    state.gripper_closed = true;
                    state.objects[obj].held = true;
                    state.objects[obj].pos = state.gripper;
                }
                Instruction::new(cfg, template, None, None, None)
            }
            Template::PushDirection => {
                let candidates = push_candidates(cfg, state);
                if candidates.is_empty() {
                    continue;
                }
                let (obj, dir) = *rng.pick(&candidates);
                Instruction::new(cfg, template, Some(state.objects[obj].color), None, Some(dir))
            }
        };
        // reject instructions already satisfied at the start
        let probe = TaskEnv::new(cfg.clone(), state.clone(), instr.clone());
        if !probe.succeeded() {
            return instr;
        }
    }
    panic!("could not sample a solvable, unsatisfied instruction");
}

/// (object index, direction) pairs with room to stage behind the object,
/// push it the full distance without leaving the table, and close an
/// empty fist at the staging point without grasping a bystander.
pub(crate) fn push_candidates(cfg: &EnvConfig, state: &WorldState) -> Vec<(usize, Direction)> {
    let mut out = Vec::new();
    for (i, o) in state.objects.iter().enumerate() {
        if o.held {
            continue;
        }
        for dir in Direction::ALL {
            let u = dir.unit();
            let staging_dist = cfg.grasp_radius + 0.025;
            let staging = [o.pos[0] - u[0] * staging_dist, o.pos[1] - u[1] * staging_dist];
            let margin = [o.pos[0] - u[0] * 0.13, o.pos[1] - u[1] * 0.13];
            let end = [
                o.pos[0] + u[0] * (cfg.push_dist + 0.05),
                o.pos[1] + u[1] * (cfg.push_dist + 0.05),
            ];
            let ok = |p: [f64; 2]| (0.02..=0.98).contains(&p[0]) && (0.02..=0.98).contains(&p[1]);
            let staging_clear = state
                .objects
                .iter()
                .enumerate()
                .all(|(j, b)| j == i || super::dist(b.pos, staging) > cfg.grasp_radius + 0.03);
            if ok(margin) && ok(end) && staging_clear {
                out.push((i, dir));
            }
        }
    }
    out
}

/// Roll the expert through one sampled episode. Fails if the expert cannot
/// finish within `t_max`, which would break the dataset invariant.
pub fn sample_episode(
    cfg: &EnvConfig,
    split: Split,
    rng: &mut Rng,
) -> Result<Episode, ExpertError> {
    let mut world = sample_world(cfg, split, rng);
    let instruction = sample_solvable_instruction(cfg, &mut world, rng);
    let mut env = TaskEnv::new(cfg.clone(), world, instruction.clone());
    let mut steps = Vec::new();
    while !env.succeeded() && steps.len() < cfg.t_max {
        let obs = env.observe();
        let action = expert_action(cfg, &env.state, &instruction)?;
        steps.push(EpisodeStep { obs, action });
        env.step(&action);
    }
    if !env.succeeded() {
        return Err(ExpertError::Unsolvable {
            reason: format!(
                "expert failed {:?} within {} steps",
                instruction.template, cfg.t_max
            ),
        });
    }
    Ok(Episode {
        instruction,
        steps,
        success: true,
        subtask_chain_position: 0,
        split,
    })
}

/// Generate a dataset deterministically from the seed. Episode i draws
/// from its own derived stream, so generation order (or concurrency)
/// cannot perturb the content.
pub fn generate_dataset(
    cfg: &EnvConfig,
    dcfg: &DatasetConfig,
) -> Result<(Vec<Episode>, Manifest), ExpertError> {
    assert!(!dcfg.splits.is_empty(), "at least one split required");
    let mut episodes = Vec::with_capacity(dcfg.n_episodes);
    for i in 0..dcfg.n_episodes {
        let split = dcfg.splits[i % dcfg.splits.len()];
        let mut rng = Rng::stream(dcfg.seed, "dataset/episode", &[i as u64]);
        episodes.push(sample_episode(cfg, split, &mut rng)?);
    }
    let mean_len = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(|e| e.steps.len() as f64).sum::<f64>() / episodes.len() as f64
    };
    let manifest = Manifest {
        n_episodes: episodes.len(),
        mean_len,
        seed: dcfg.seed,
        splits: dcfg.splits.iter().map(|s| s.letter().to_string()).collect(),
    };
    Ok((episodes, manifest))
}

// Wire format: one episode per JSONL line.
#[derive(Serialize, Deserialize)]
struct WireEpisode {
    instr: WireInstr,
    steps: Vec<WireStep>,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct WireInstr {
    template: usize,
    args: Vec<usize>,
    tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct WireStep {
    obs: Vec<Vec<f64>>,
    pose: Vec<f64>,
    grip: u8,
}

fn to_wire(e: &Episode) -> WireEpisode {
    WireEpisode {
        instr: WireInstr {
            template: e.instruction.template.id(),
            args: e.instruction.args(),
            tokens: e.instruction.tokens.clone(),
        },
        steps: e
            .steps
            .iter()
            .map(|s| WireStep {
                obs: s.obs.clone(),
                pose: s.action.pose.to_vec(),
                grip: u8::from(s.action.gripper),
            })
            .collect(),
        split: e.split.letter().to_string(),
    }
}

fn from_wire(w: WireEpisode) -> Result<Episode, String> {
    let template = Template::from_id(w.instr.template)
        .ok_or_else(|| format!("bad template id {}", w.instr.template))?;
    let mut args = w.instr.args.iter().copied();
    let (color, zone, dir) = match template {
        Template::Reach | Template::Grasp => (args.next(), None, None),
        Template::PlaceInZone => (args.next(), args.next(), None),
        Template::Release => (None, None, None),
        Template::PushDirection => {
            let c = args.next();
            let d = args.next().and_then(Direction::from_id);
            (c, None, d)
        }
    };
    let split = Split::from_letter(&w.split).ok_or_else(|| format!("bad split {}", w.split))?;
    let steps = w
        .steps
        .into_iter()
        .map(|s| {
            let mut pose = [0.0; 6];
            for (i, v) in s.pose.iter().take(6).enumerate() {
                pose[i] = *v;
            }
            EpisodeStep {
                obs: s.obs,
                action: Action7 { pose, gripper: s.grip != 0 },
            }
        })
        .collect();
    Ok(Episode {
        instruction: Instruction {
            template,
            color,
            zone,
            dir,
            tokens: w.instr.tokens,
        },
        steps,
        success: true,
        subtask_chain_position: 0,
        split,
    })
}

pub fn write_dataset(
    dataset_path: &Path,
    manifest_path: &Path,
    episodes: &[Episode],
    manifest: &Manifest,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(dataset_path)?);
    for e in episodes {
        serde_json::to_writer(&mut w, &to_wire(e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    std::fs::write(manifest_path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> std::io::Result<Vec<Episode>> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireEpisode = serde_json::from_str(&line)?;
        out.push(from_wire(wire).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> std::io::Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        let dcfg = DatasetConfig { n_episodes: 12, splits: vec![Split::A, Split::B], seed: 99 };
        let (e1, m1) = generate_dataset(&cfg, &dcfg).unwrap();
        let (e2, m2) = generate_dataset(&cfg, &dcfg).unwrap();
        let s1 = serde_json::to_string(&e1.iter().map(to_wire).collect::<Vec<_>>()).unwrap();
        let s2 = serde_json::to_string(&e2.iter().map(to_wire).collect::<Vec<_>>()).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(m1.mean_len, m2.mean_len);
    }

    #[test]
    fn manifest_mean_len_matches_definition() {
        let cfg = EnvConfig::default();
        let dcfg = DatasetConfig { n_episodes: 10, splits: vec![Split::D], seed: 4 };
        let (eps, m) = generate_dataset(&cfg, &dcfg).unwrap();
        let mean = eps.iter().map(|e| e.steps.len() as f64).sum::<f64>() / eps.len() as f64;
        assert_eq!(m.mean_len, mean);
        assert_eq!(m.n_episodes, 10);
    }

    #[test]
    fn expert_succeeds_on_every_generated_episode() {
        let cfg = EnvConfig::default();
        let dcfg = DatasetConfig {
            n_episodes: 60,
            splits: vec![Split::A, Split::B, Split::C, Split::D],
            seed: 21,
        };
        let (eps, _) = generate_dataset(&cfg, &dcfg).unwrap();
        for e in &eps {
            assert!(e.success);
            assert!(!e.steps.is_empty());
            assert!(e.steps.len() <= cfg.t_max);
        }
    }

    #[test]
    fn roundtrip_through_jsonl_preserves_episodes() {
        let cfg = EnvConfig::default();
        let dcfg = DatasetConfig { n_episodes: 5, splits: vec![Split::C], seed: 8 };
        let (eps, manifest) = generate_dataset(&cfg, &dcfg).unwrap();
        let dir = std::env::temp_dir().join("deer_ds_test");
        std::fs::create_dir_all(&dir).unwrap();
        let dp = dir.join("data.jsonl");
        let mp = dir.join("data.manifest.json");
        write_dataset(&dp, &mp, &eps, &manifest).unwrap();
        let loaded = load_dataset(&dp).unwrap();
        assert_eq!(loaded.len(), eps.len());
        for (a, b) in loaded.iter().zip(eps.iter()) {
            assert_eq!(a.instruction, b.instruction);
            assert_eq!(a.steps.len(), b.steps.len());
            assert_eq!(a.steps[0].obs, b.steps[0].obs);
            assert_eq!(a.split, b.split);
        }
        let m = load_manifest(&mp).unwrap();
        assert_eq!(m.n_episodes, manifest.n_episodes);
    }
}
