//! Chooses the object-slot visual weight so that the divergence gate
//! separates the two slot kinds at the target threshold.
//!
//! The sweep raises `w_vis_object` over a grid and stops at the first value
//! where at least `min_fraction` of function-slot steps fall at or below γ and
//! the 5th percentile of disjoint-object-slot steps sits `margin_decades`
//! above γ.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::exec::Execution;
use crate::experiment::{run_jobs, slot_stats, Arm, ContrastSource, ExperimentError, RunPlan};
use crate::sim::world::{SynthWorld, WorldError};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no visual weight in the grid satisfies the calibration target")]
    NoSolution { grid: Vec<CalibrationPoint> },
    #[error("invalid calibration settings: {0}")]
    Settings(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub gamma: f64,
    pub min_fraction: f64,
    pub margin_decades: f64,
    pub grid_start: f64,
    pub grid_step: f64,
    pub grid_max: f64,
    pub seeds: Vec<u64>,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            gamma: -4.0,
            min_fraction: 0.95,
            margin_decades: 3.0,
            grid_start: 0.25,
            grid_step: 0.25,
            grid_max: 4.0,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub w_vis_object: f64,
    pub function_fraction_below: f64,
    pub disjoint_object_fraction_above: f64,
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub disjoint_object_p05: f64,
    pub accepted: bool,
}

/// Stored in the world file next to the weights it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub settings: CalibrationSettings,
    pub chosen: CalibrationPoint,
    pub grid: Vec<CalibrationPoint>,
}

fn measure(
    world: &Arc<SynthWorld>,
    settings: &CalibrationSettings,
    execution: Execution,
) -> Result<CalibrationPoint, CalibrationError> {
    let engine = EngineConfig { gamma: settings.gamma, ..EngineConfig::default() };
    let plan = RunPlan {
        arms: vec![Arm::regular(&engine)],
        seeds: settings.seeds.clone(),
        n_images: None,
        contrast: ContrastSource::Random,
        prompt: Vec::new(),
        execution,
    };
    let jobs = run_jobs(world, &plan)?;
    let stats = slot_stats(
        world,
        settings.gamma,
        0,
        jobs.iter().map(|j| {
            let a: std::collections::BTreeSet<_> = world.images[j.image].objects.iter().collect();
            let disjoint = world.images[j.contrast].objects.iter().all(|o| !a.contains(o));
            (&j.runs[0], disjoint)
        }),
    );
    let accepted = stats.function_fraction_below >= settings.min_fraction
        && stats.disjoint_object_fraction_above >= settings.min_fraction
        && stats.disjoint_object_p05 >= settings.gamma + settings.margin_decades;
    Ok(CalibrationPoint {
        w_vis_object: world.config.w_vis_object,
        function_fraction_below: stats.function_fraction_below,
        disjoint_object_fraction_above: stats.disjoint_object_fraction_above,
        disjoint_object_p05: stats.disjoint_object_p05,
        accepted,
    })
}

/// Returns the world with the chosen visual weight and its calibration record.
pub fn calibrate(
    world: &SynthWorld,
    settings: &CalibrationSettings,
    execution: Execution,
) -> Result<SynthWorld, CalibrationError> {
    if !(settings.grid_step > 0.0 && settings.grid_start > 0.0 && settings.grid_max >= settings.grid_start) {
        return Err(CalibrationError::Settings("grid must be positive and increasing".into()));
    }
    if settings.seeds.is_empty() {
        return Err(CalibrationError::Settings("at least one seed is required".into()));
    }
    let mut grid = Vec::new();
    let mut k = 0u32;
    loop {
        let w_vis = settings.grid_start + k as f64 * settings.grid_step;
        if w_vis > settings.grid_max + 1e-12 {
            return Err(CalibrationError::NoSolution { grid });
        }
        let candidate = Arc::new(world.with_visual_weight(w_vis)?);
        let point = measure(&candidate, settings, execution)?;
        let accepted = point.accepted;
        grid.push(point.clone());
        if accepted {
            let mut out = Arc::try_unwrap(candidate).unwrap_or_else(|a| (*a).clone());
            out.calibration = Some(CalibrationRecord { settings: settings.clone(), chosen: point, grid });
            return Ok(out);
        }
        k += 1;
    }
}
