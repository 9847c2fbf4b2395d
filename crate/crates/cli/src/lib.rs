//! Command line and HTTP front end for `jointpred-core`.

pub mod server;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use jointpred_core::data::{self, WindowConfig};
use jointpred_core::evaluator::{self, EvalConfig};
use jointpred_core::planner::{self, Scenario, SolverOptions};
use jointpred_core::service::{self, Directive, PlanRequest, PredictRequest};
use jointpred_core::synth::{self, SynthSpec, Template};
use jointpred_core::trainer::{self, TrainingConfig};
use jointpred_core::{Model, ModelConfig, Scene};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_ENV: &str = "JOINTPRED_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "jointpred", version, about = "Joint multi-agent trajectory prediction and contingency planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes as a JSON array.
    GenData {
        /// intersection_yield_or_go, car_following, lane_change or crossing_pedestrians.
        #[arg(long)]
        template: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a per-epoch loss CSV.
    Train {
        /// Scenes JSON written by gen-data, or a raw `frame agent x y` track file (.txt).
        #[arg(long)]
        data: PathBuf,
        /// JSON or TOML file with `model`, `training` and `windows` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute ADE/FDE, Best-of-N and collision rates on a scene set.
    Evaluate {
        #[arg(long, env = CHECKPOINT_ENV)]
        model: PathBuf,
        /// Same formats as `train --data`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.json and the CSV tables.
        #[arg(long)]
        out_dir: PathBuf,
        /// Also render the Best-of-N and collision-rate curves as SVG.
        #[arg(long)]
        plots: bool,
        #[arg(long, default_value_t = 5)]
        n_max: usize,
        #[arg(long, default_value_t = 0)]
        beta: usize,
        /// Count a collision when any returned mode collides.
        #[arg(long)]
        any_mode: bool,
    },
    /// Predict every clique of a scene and print the response JSON.
    Predict {
        #[arg(long, env = CHECKPOINT_ENV)]
        model: PathBuf,
        /// A single scene JSON; ignored when --request is given.
        #[arg(long, required_unless_present = "request")]
        scene: Option<PathBuf>,
        /// A full request JSON as accepted by POST /predict.
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        beta: usize,
        #[arg(long)]
        frame: Option<usize>,
        /// `ID=MANEUVER`, for example `2=brake a=-4`. Repeatable.
        #[arg(long = "condition")]
        conditions: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contingency planning, one-shot from a plan request or closed-loop from a scenario.
    Plan {
        #[arg(long, env = CHECKPOINT_ENV)]
        model: PathBuf,
        /// Plan request JSON as accepted by POST /plan.
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        request: Option<PathBuf>,
        /// Closed-loop scenario JSON.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG of the planned branches (one-shot mode only).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = CHECKPOINT_ENV)]
        model: Option<PathBuf>,
        /// Scenes listed by GET /scenes.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

/// Training configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// Defaults to the vehicle or pedestrian windows matching `model.kinds`.
    pub windows: Option<WindowConfig>,
}

/// Reads JSON, or TOML when the extension is `.toml`.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Parses `ID=MANEUVER`.
pub fn parse_condition(text: &str) -> Result<(u64, Directive)> {
    let (id, maneuver) = text.split_once('=').with_context(|| format!("condition {text:?} is not ID=MANEUVER"))?;
    let id: u64 = id.trim().parse().with_context(|| format!("agent id {id:?} is not an integer"))?;
    service::Maneuver::parse(maneuver)?;
    Ok((id, Directive::Maneuver { maneuver: maneuver.trim().to_string() }))
}

pub fn window_config(model: &ModelConfig) -> WindowConfig {
    let mut w = if model.kinds == [jointpred_core::AgentKind::Pedestrian] { WindowConfig::pedestrians() } else { WindowConfig::vehicles() };
    w.history = model.history;
    w.future = model.future;
    w.max_clique = Some(model.max_clique);
    w.graph.horizon = model.future;
    w.graph.dt = model.dt;
    w
}

/// Scenes JSON, or one pedestrian scene from a raw `frame agent x y` track
/// file when the extension is `.txt`.
pub fn load_data(path: &Path) -> Result<Vec<Scene>> {
    if path.extension().is_some_and(|e| e == "txt") {
        Ok(vec![data::load_trajectory_file(path, &data::LoadOptions::default())?])
    } else {
        Ok(data::load_scenes(path)?)
    }
}

fn windows_of(scenes: &[Scene], cfg: &WindowConfig) -> Vec<data::TrainingWindow> {
    scenes.iter().flat_map(|s| data::windows(s, cfg)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { template, count, seed, out } => {
            let spec = SynthSpec::new(Template::parse(&template)?, count);
            let scenes = synth::synth_scenarios(&spec, seed)?;
            data::save_scenes(&out, &scenes)?;
            log::info!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Train { data: data_path, config, out, loss_csv, epochs, seed } => {
            let mut file: TrainFile = match config {
                Some(p) => read_config(&p)?,
                None => TrainFile::default(),
            };
            if let Some(e) = epochs {
                file.training.epochs = e;
            }
            if let Some(s) = seed {
                file.training.seed = s;
            }
            let scenes = load_data(&data_path)?;
            let wcfg = file.windows.unwrap_or_else(|| window_config(&file.model));
            let windows = windows_of(&scenes, &wcfg);
            if windows.is_empty() {
                bail!("no training windows in {}", data_path.display());
            }
            let mut model = Model::new(file.model.clone())?;
            let mut csv = String::from("epoch,alpha,likelihood,kl,collision,total\n");
            let reports = trainer::train(&mut model, &windows, &file.training, |r| {
                log::info!("epoch {} alpha {:.3} loss {:.4}", r.epoch, r.alpha, r.loss.total);
            })?;
            for r in &reports {
                csv.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.alpha, r.loss.likelihood, r.loss.kl, r.loss.collision, r.loss.total));
            }
            model.save(&out)?;
            if let Some(p) = loss_csv {
                fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
            }
            log::info!("trained on {} windows, checkpoint {}", windows.len(), out.display());
        }
        Command::Evaluate { model, data: data_path, out_dir, plots, n_max, beta, any_mode } => {
            let model = load_model(&model)?;
            let scenes = load_data(&data_path)?;
            let windows = windows_of(&scenes, &window_config(&model.config));
            let cfg = EvalConfig { n_max, beta, collision_any_mode: any_mode, ..EvalConfig::default() };
            let report = evaluator::evaluate(&model, &windows, &cfg)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
            fs::write(out_dir.join("horizons.csv"), report.horizon_csv())?;
            fs::write(out_dir.join("best_of_n.csv"), report.bon_csv())?;
            if plots {
                fs::write(out_dir.join("best_of_n.svg"), report.bon_svg())?;
                fs::write(out_dir.join("collision_rate.svg"), report.collision_svg())?;
            }
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Predict { model, scene, request, k, beta, frame, conditions, out } => {
            let model = load_model(&model)?;
            let request = match request {
                Some(p) => read_json::<PredictRequest>(&p)?,
                None => {
                    let scene: Scene = read_json(scene.as_deref().expect("clap requires --scene"))?;
                    let mut conditioning = BTreeMap::new();
                    for c in &conditions {
                        let (id, d) = parse_condition(c)?;
                        conditioning.insert(id, d);
                    }
                    PredictRequest { scene, frame, k, beta, conditioning, include_timings: false }
                }
            };
            let response = service::predict_scene(&model, &request)?;
            write_output(out.as_deref(), &serde_json::to_string(&response)?)?;
        }
        Command::Plan { model, request, scenario, out, svg } => {
            let model = load_model(&model)?;
            if let Some(p) = scenario {
                let scenario: Scenario = read_json(&p)?;
                let result = planner::replan_loop(&scenario, &model, &SolverOptions::fast())?;
                write_output(out.as_deref(), &serde_json::to_string(&result)?)?;
            } else {
                let request: PlanRequest = read_json(request.as_deref().expect("clap requires --request"))?;
                let response = service::plan_scene(&model, &request)?;
                if let Some(p) = svg {
                    fs::write(&p, response.plan.to_svg(&response.problem)).with_context(|| format!("writing {}", p.display()))?;
                }
                write_output(out.as_deref(), &serde_json::to_string(&response)?)?;
            }
        }
        Command::Serve { model, scenes, addr } => {
            let loaded = match &model {
                Some(p) => Some(load_model(p)?),
                None => {
                    log::warn!("no checkpoint given; prediction endpoints answer 503 until one is loaded");
                    None
                }
            };
            let scenes = match scenes {
                Some(p) => data::load_scenes(&p)?,
                None => Vec::new(),
            };
            let state = Arc::new(server::AppState::new(loaded, model, scenes));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(state, &addr))?;
        }
    }
    Ok(())
}
