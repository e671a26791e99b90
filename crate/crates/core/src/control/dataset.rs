//! Behavioural-cloning dataset export.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::run_episode;
use crate::obs::LAYOUT_VERSION;
use crate::scenario::Scenario;
use crate::sim::{TrainStatus, World};

use super::{ControlParams, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcSample {
    pub layout: String,
    pub phase: Phase,
    pub episode: usize,
    pub seed: u64,
    pub train: usize,
    pub tick: u32,
    pub obs: Vec<f32>,
    pub action: usize,
    pub succeeded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout: String,
    pub controller: String,
    pub episodes: usize,
    pub dispatch_samples: usize,
    pub routing_samples: usize,
    pub dropped: usize,
    pub filter_failed: bool,
}

/// Runs one episode per (scenario, seed) and keeps every non-skipped decision.
pub fn collect_bc_dataset(
    scenarios: &[Scenario],
    controller: &str,
    params: &ControlParams,
    seeds: &[u64],
    filter_failed: bool,
) -> Result<(Vec<BcSample>, Manifest)> {
    let mut samples = Vec::new();
    let mut manifest = Manifest {
        layout: LAYOUT_VERSION.into(),
        filter_failed,
        ..Default::default()
    };
    let mut episode = 0;
    for sc in scenarios {
        let world = World::new(sc.clone())?;
        for &seed in seeds {
            let mut ctl = super::hierarchical(controller, params, seed)?.recording();
            manifest.controller = controller.to_string();
            let run = run_episode(&world, &mut ctl, seed, params).map_err(|e| e.with_seed(seed))?;
            for d in ctl.decisions.drain(..) {
                let succeeded = run.final_state.trains[d.train].status == TrainStatus::Arrived;
                if filter_failed && !succeeded {
                    manifest.dropped += 1;
                    continue;
                }
                match d.phase {
                    Phase::Dispatch => manifest.dispatch_samples += 1,
                    Phase::Routing => manifest.routing_samples += 1,
                }
                samples.push(BcSample {
                    layout: LAYOUT_VERSION.into(),
                    phase: d.phase,
                    episode,
                    seed,
                    train: d.train,
                    tick: d.tick,
                    obs: d.obs,
                    action: d.action,
                    succeeded,
                });
            }
            episode += 1;
        }
    }
    manifest.episodes = episode;
    Ok((samples, manifest))
}

/// Appends samples as JSON lines, refusing files written with another layout.
pub fn append_samples(path: &Path, samples: &[BcSample]) -> Result<()> {
    if path.exists() {
        let f = BufReader::new(File::open(path)?);
        if let Some(line) = f.lines().next() {
            let first: BcSample = serde_json::from_str(&line?)?;
            if first.layout != LAYOUT_VERSION {
                return Err(Error::VersionMismatch {
                    expected: LAYOUT_VERSION.into(),
                    found: first.layout,
                });
            }
        }
    }
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for s in samples {
        if s.layout != LAYOUT_VERSION {
            return Err(Error::VersionMismatch {
                expected: LAYOUT_VERSION.into(),
                found: s.layout.clone(),
            });
        }
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<BcSample>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
