use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selene_core::data::{gen_shapes_dataset, list_ids, make_split, parse_fraction, read_samples, write_dataset, SplitSpec, IGNORE};
use selene_core::gradcheck::{standard_suite, GradCheckOptions, GradCheckReport};
use selene_core::metrics::confusion;
use selene_core::routing::{count_flops, Checkpoint, INPUT_DIVISOR, RoutingConfig, RoutingNet};
use selene_core::trainer::{fit, TrainData, TrainState, METRICS_FILE};

use crate::config::{parse_pair, RunConfig};
use crate::{EvalArgs, FlopsArgs, GenDataArgs, GradcheckArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const FLOPS_FILE: &str = "flops.csv";
pub const FAULT_SCALE: f64 = 1.01;
const GRADCHECK_SEED: u64 = 17;

/// An output directory that is removed again if the command fails after
/// creating it.
struct OutDir {
    path: PathBuf,
    created: bool,
    keep: bool,
}

impl OutDir {
    fn create(path: &Path) -> Result<Self> {
        let created = !path.exists();
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(OutDir {
            path: path.to_path_buf(),
            created,
            keep: false,
        })
    }

    fn commit(mut self) {
        self.keep = true;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.created && !self.keep {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<ExitCode> {
    let seed = a.common.seed_override()?.unwrap_or(0);
    let fractions = a.fraction.iter().map(|f| parse_fraction(f)).collect::<selene_core::Result<Vec<_>>>()?;
    ensure!(a.count > 0, "--count must be at least 1");
    let all = gen_shapes_dataset(a.count + a.val_count, a.classes, a.size, seed)?;
    let (train, val) = all.split_at(a.count);
    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let splits = fractions
        .iter()
        .map(|&f| make_split(&ids, f, seed))
        .collect::<selene_core::Result<Vec<_>>>()?;

    let out = OutDir::create(&a.out)?;
    write_dataset(&a.out, train)?;
    if !val.is_empty() {
        write_dataset(&a.out.join("val"), val)?;
    }
    for s in &splits {
        let path = s.save(&a.out)?;
        println!("{}: {} labeled, {} unlabeled", path.display(), s.labeled.len(), s.unlabeled.len());
    }
    out.commit();
    println!("wrote {} samples ({} validation) to {}", train.len(), val.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Config file, then `SELENE_SEED`/`--seed`, then the named flags, then `--set`.
pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.common.seed_override()? {
        cfg.train.seed = seed;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let named = [
        ("data", path(&a.data)),
        ("val", path(&a.val)),
        ("split", path(&a.split)),
        ("fraction", a.fraction.clone()),
        ("method", a.method.clone()),
        ("epochs", a.epochs.clone()),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for s in &a.set {
        let (k, v) = parse_pair(s)?;
        cfg.set(&k, &v)?;
    }
    cfg.train.threads = a.common.threads();
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    labeled: Vec<selene_core::data::Sample>,
    unlabeled: Vec<selene_core::data::Sample>,
    val: Vec<selene_core::data::Sample>,
    split: SplitSpec,
}

fn load_data(cfg: &RunConfig) -> Result<Loaded> {
    let dir = cfg.data.as_ref().expect("validated");
    let split = match &cfg.split {
        Some(p) => SplitSpec::load(p).with_context(|| format!("reading split {}", p.display()))?,
        None => {
            let ids = list_ids(dir).with_context(|| format!("listing {}", dir.display()))?;
            ensure!(!ids.is_empty(), "{} holds no images", dir.display());
            make_split(&ids, cfg.fraction, cfg.split_seed.unwrap_or(cfg.train.seed))?
        }
    };
    let labeled = read_samples(dir, &split.labeled)?;
    let mut unlabeled = read_samples(dir, &split.unlabeled)?;
    for s in &mut unlabeled {
        s.mask.iter_mut().for_each(|m| *m = IGNORE);
    }
    let val = match &cfg.val {
        Some(v) => read_samples(v, &list_ids(v)?)?,
        None => Vec::new(),
    };
    Ok(Loaded {
        labeled,
        unlabeled,
        val,
        split,
    })
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_run_config(a)?;
    let resume = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some(TrainState::from_checkpoint(&ck)?)
        }
        None => None,
    };
    if resume.is_none() && a.out.join(METRICS_FILE).exists() {
        bail!("{} already holds a run; pass --resume or pick another --out", a.out.display());
    }
    let data = load_data(&cfg)?;
    info!(
        "{} labeled, {} unlabeled, {} validation samples; method {}",
        data.labeled.len(),
        data.unlabeled.len(),
        data.val.len(),
        cfg.train.method
    );

    let out = OutDir::create(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(a.out.join(data.split.file_name()), data.split.to_text())?;
    let td = TrainData {
        labeled: &data.labeled,
        unlabeled: &data.unlabeled,
        val: &data.val,
    };
    let r = fit(&cfg.routing, &cfg.train, &td, Some(&a.out), resume)?;
    out.commit();
    match r.history.last() {
        Some(last) => {
            print!("trained {} iterations; final loss {:.6}", r.history.len(), last.loss_total);
            if let Some(m) = r.history.iter().rev().find_map(|h| h.miou_val) {
                print!("; val mIoU {m:.4}");
            }
            println!();
        }
        None => println!("nothing to do: {} epochs already done", r.state.epochs_done),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let net = ck.to_net()?;
    let ids = list_ids(&a.data).with_context(|| format!("listing {}", a.data.display()))?;
    ensure!(!ids.is_empty(), "{} holds no images", a.data.display());
    let samples = read_samples(&a.data, &ids)?;
    let cm = confusion(&net, &samples)?;
    let (miou, acc) = (cm.miou(), cm.pixel_accuracy());
    println!("samples {}", samples.len());
    for (c, iou) in cm.class_iou().iter().enumerate() {
        match iou {
            Some(v) => println!("class {c} IoU {v:.6}"),
            None => println!("class {c} IoU absent"),
        }
    }
    println!("pixel accuracy {acc:.6}");
    println!("mIoU {miou:.6}");
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        let path = dir.join(EVAL_FILE);
        let mut text = if path.exists() {
            fs::read_to_string(&path)?
        } else {
            "checkpoint,data,samples,pixel_accuracy,miou\n".to_string()
        };
        writeln!(
            text,
            "{},{},{},{acc},{miou}",
            a.checkpoint.display(),
            a.data.display(),
            samples.len()
        )?;
        fs::write(&path, text)?;
        out.commit();
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck_reports(seed: u64, inject: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut reports = standard_suite(seed, GradCheckOptions::default())?;
    if let Some(name) = inject {
        let Some(i) = reports.iter().position(|r| r.name == name) else {
            let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
            bail!("no gradient check named {name:?}; available: {}", names.join(", "));
        };
        let faulty = standard_suite(
            seed,
            GradCheckOptions {
                analytic_scale: FAULT_SCALE,
                ..GradCheckOptions::default()
            },
        )?;
        reports[i] = faulty[i].clone();
    }
    Ok(reports)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let seed = a.common.seed_override()?.unwrap_or(GRADCHECK_SEED);
    let reports = gradcheck_reports(seed, a.inject_fault.as_deref())?;
    let mut csv = String::from("op,checked,max_rel_err,passed\n");
    for r in &reports {
        println!(
            "{:<24} {:>6} checked  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        writeln!(csv, "{},{},{:e},{}", r.name, r.checked, r.max_rel_err, r.passed)?;
    }
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        fs::write(dir.join(GRADCHECK_FILE), csv)?;
        out.commit();
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let parse = || -> Option<(usize, usize)> {
        let (h, w) = s.split_once(['x', 'X'])?;
        Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
    };
    parse().with_context(|| format!("input size {s:?} is not HxW"))
}

pub fn flops(a: &FlopsArgs) -> Result<ExitCode> {
    let (h, w) = parse_hw(&a.input)?;
    ensure!(
        h > 0 && w > 0 && h % INPUT_DIVISOR == 0 && w % INPUT_DIVISOR == 0,
        "input {h}x{w} must have both sides divisible by {INPUT_DIVISOR}"
    );
    for &t in &a.tau {
        ensure!((0.0..=1.0).contains(&t), "tau {t} outside [0, 1]");
    }
    let net = match &a.checkpoint {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.to_net()?,
        None => {
            let cfg = RoutingConfig {
                num_layers: a.layers,
                base_channels: a.channels,
                num_classes: a.classes,
                ..RoutingConfig::default()
            };
            let seed = a.common.seed_override()?.unwrap_or(0);
            RoutingNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?
        }
    };
    let mut csv = String::from("tau,height,width,macs\n");
    for &tau in &a.tau {
        let macs = count_flops(&net, h, w, tau);
        println!("tau {tau}: {macs} MACs ({:.6} GMACs) at {h}x{w}", macs as f64 / 1e9);
        writeln!(csv, "{tau},{h},{w},{macs}")?;
    }
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        fs::write(dir.join(FLOPS_FILE), csv)?;
        out.commit();
    }
    Ok(ExitCode::SUCCESS)
}
