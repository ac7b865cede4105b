//! `densedet`: data generation, anchor fitting, training, evaluation and
//! inspection of the toy dense detector.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densedet_core::assignment::{ams_labels, assign_ao, assigned_overlap, compute_pono, pono_labels, pred_iou_map};
use densedet_core::config::KeyValues;
use densedet_core::data::{generate, write_pgm, Dataset, GenSpec};
use densedet_core::eval::evaluate_model;
use densedet_core::train::{all_keys, fit_anchors, run_ablation, summary_csv, AblationConfig, EvalConfig};
use densedet_core::{Checkpoint, Offsets, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "densedet",
    version,
    about = "Dense anchor-based detector training on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster per-class anchor shapes from a dataset.
    Anchors {
        #[arg(long)]
        dataset: PathBuf,
        /// Anchor file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector; resumes when given a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training scenes; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iou_nms: Option<f64>,
        #[arg(long)]
        score_min: Option<f64>,
    },
    /// Write overlap, predicted-IoU and label maps of one scene.
    AssignDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate learned balance weights against anchor area.
    PlotWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a mode × label rule × loss matrix.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<KeyValues, Box<dyn std::error::Error>> {
    let kv = match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.check_known(&all_keys())?;
    Ok(kv)
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData { config, out, seed } => {
            let kv = load_config(Some(&config))?;
            let mut spec = GenSpec::from_config(&kv)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let n = kv.get_or("scenes", 200usize)?;
            let ds = Dataset {
                n_classes: spec.n_classes,
                scenes: generate(&spec, n)?,
            };
            ds.save(&out)?;
            let objects: usize = ds.scenes.iter().map(|s| s.gt.len()).sum();
            println!("scenes,objects\n{n},{objects}");
        }
        Command::Anchors {
            dataset,
            out,
            config,
            seed,
        } => {
            let cfg = TrainConfig::from_config(&load_config(config.as_deref())?)?;
            let ds = Dataset::load(&dataset)?;
            let anchors = fit_anchors(&ds, cfg.n_anchors, seed.unwrap_or(cfg.seed), cfg.kmeans_iter)?;
            anchors.save(&out)?;
            print!("{}", anchors.to_text());
        }
        Command::Train {
            config,
            out,
            dataset,
            checkpoint,
            seed,
        } => train(config.as_deref(), &out, dataset.as_deref(), checkpoint.as_deref(), seed)?,
        Command::Eval {
            checkpoint,
            dataset,
            out,
            config,
            iou_nms,
            score_min,
        } => {
            let mut e = EvalConfig::from_config(&load_config(config.as_deref())?)?;
            e.iou_nms = iou_nms.unwrap_or(e.iou_nms);
            e.score_min = score_min.unwrap_or(e.score_min);
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&dataset)?;
            let grid = ck.grid()?;
            let report = evaluate_model(
                &ck.state.model,
                &grid,
                &ds.scenes,
                ck.anchors.n_classes(),
                e.score_min,
                e.iou_nms,
                e.iou_match,
            )?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("eval.csv"), report.to_csv())?;
                fs::write(dir.join("eval.txt"), report.to_text())?;
            }
            eprint!("{}", report.to_text());
            print!("{}", report.to_csv());
        }
        Command::AssignDump {
            checkpoint,
            dataset,
            scene,
            out,
        } => assign_dump(&checkpoint, &dataset, scene, &out)?,
        Command::PlotWeights { checkpoint, out } => {
            let table = Checkpoint::load(&checkpoint)?.weight_table();
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("weights.csv"), &table)?;
            }
            print!("{table}");
        }
        Command::Ablate { config, out, seed } => {
            let mut cfg = AblationConfig::from_config(&load_config(Some(&config))?)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            fs::create_dir_all(&out)?;
            let results = run_ablation(&cfg, Some(&out))?;
            print!("{}", summary_csv(&results));
        }
    }
    Ok(())
}

fn train(
    config: Option<&Path>,
    out: &Path,
    dataset: Option<&Path>,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> CliResult {
    let kv = load_config(config)?;
    let (cfg, anchors, state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.config, Some(ck.anchors), Some(ck.state))
        }
        None => {
            let mut cfg = TrainConfig::from_config(&kv)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            (cfg, None, None)
        }
    };
    let ds = match dataset {
        Some(d) => Dataset::load(d)?,
        None => {
            let spec = GenSpec::from_config(&kv)?;
            let n = kv.get_or("train_scenes", 200usize)?;
            Dataset {
                n_classes: spec.n_classes,
                scenes: generate(&spec, n)?,
            }
        }
    };
    let anchors = match anchors {
        Some(a) => a,
        None => fit_anchors(&ds, cfg.n_anchors, cfg.seed, cfg.kmeans_iter)?,
    };
    if anchors.n_classes() != ds.n_classes {
        return Err(format!(
            "anchors cover {} classes, dataset has {}",
            anchors.n_classes(),
            ds.n_classes
        )
        .into());
    }
    fs::create_dir_all(out)?;
    anchors.save(&out.join("anchors.txt"))?;
    let trainer = Trainer::new(cfg, anchors, &ds.scenes)?;
    let mut state = match state {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let reports = trainer.run(&mut state, Some(out))?;
    if let Some(last) = reports.last() {
        eprintln!(
            "iteration {}: total {:.5} loc {:.5} cls {:.5} reg {:.5}",
            state.iteration, last.total, last.loc, last.cls, last.reg
        );
    }
    println!("{}", out.join("checkpoint.ddck").display());
    Ok(())
}

fn assign_dump(checkpoint: &Path, dataset: &Path, index: usize, out: &Path) -> CliResult {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(dataset)?;
    let scene = ds
        .scenes
        .get(index)
        .ok_or_else(|| format!("scene {index} out of range (dataset has {})", ds.scenes.len()))?;
    let grid = ck.grid()?;
    let dims = grid.dims();
    let pred = ck.state.model.predict(&scene.image)?;
    let offsets: Vec<Offsets> = pred
        .offsets
        .data()
        .chunks_exact(4)
        .map(|o| Offsets::new(o[0], o[1], o[2], o[3]))
        .collect();
    let asg = assign_ao(&grid, &scene.gt);
    let ao = assigned_overlap(&grid, &scene.gt, &asg);
    let o = compute_pono(&grid, &scene.gt, &asg);
    let o_hat = pred_iou_map(&grid, &offsets, &scene.gt, &asg)?;
    let ams = ams_labels(&o, &o_hat, ck.config.label_threshold)?;
    let pono = pono_labels(&o, ck.config.label_threshold);

    fs::create_dir_all(out)?;
    let scale = grid.feat_stride();
    let (h, w) = (dims.h * scale, dims.w * scale);
    for c in 0..dims.classes {
        for a in 0..dims.anchors {
            let maps: [(&str, Box<dyn Fn(usize) -> f64>); 4] = [
                ("pono", Box::new(|k| o[k])),
                ("ohat", Box::new(|k| o_hat[k])),
                ("ams", Box::new(|k| ams[k] as u8 as f64)),
                ("ao", Box::new(|k| ao[k])),
            ];
            for (name, f) in &maps {
                let mut img = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        img.push(f(dims.index(y / scale, x / scale, c, a)));
                    }
                }
                write_pgm(&out.join(format!("{name}_c{c}_a{a}.pgm")), w, h, &img)?;
            }
        }
    }
    let mut csv = String::from("i,j,class,anchor,gt,ao,pono,o_hat,ams_label,pono_label\n");
    for i in 0..dims.h {
        for j in 0..dims.w {
            for c in 0..dims.classes {
                for a in 0..dims.anchors {
                    let k = dims.index(i, j, c, a);
                    let gt = asg[k].map_or(String::from("-"), |n| n.to_string());
                    writeln!(
                        csv,
                        "{i},{j},{c},{a},{gt},{},{},{},{},{}",
                        ao[k], o[k], o_hat[k], ams[k] as u8, pono[k] as u8
                    )?;
                }
            }
        }
    }
    fs::write(out.join("maps.csv"), &csv)?;
    println!("{}", out.display());
    Ok(())
}
