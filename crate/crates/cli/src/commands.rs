use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use atkl::data::{
    clean_file_name, load_wav, make_dataset, noisy_file_name, read_manifest, save_wav, write_manifest, Clip, Split,
};
use atkl::distill::{
    evaluate, run_distillation, train_direct, train_teacher, write_metrics, Mode, Pair, TrainData, TrainReport,
};
use atkl::gradsuite::{run_grad_suite, GRAD_TOL};
use atkl::models::{build_model, count_params, Checkpoint, Model, ModelConfig};
use atkl::{rng, Error, Result, Tensor};

use crate::config::ExperimentConfig;
use crate::{Arch, Cli, Command, CountWhich, SplitArg};

pub const MANIFEST: &str = "manifest.csv";

/// Distillation modes accepted by `distill --mode`.
#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    OutputOnly,
    At,
    KlEnc,
    KlDec,
    KlAll,
    AtKl,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::OutputOnly => Mode::OutputOnly,
            ModeArg::At => Mode::At,
            ModeArg::KlEnc => Mode::KlEnc,
            ModeArg::KlDec => Mode::KlDec,
            ModeArg::KlAll => Mode::KlAll,
            ModeArg::AtKl => Mode::AtKl,
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_)
        | Error::Config(_)
        | Error::Checkpoint(_)
        | Error::Shape { .. }
        | Error::InputTooShort { .. } => 2,
        Error::Numeric { .. } | Error::Diverged { .. } | Error::DegenerateReference => 3,
        Error::Io(_) | Error::Parse(_) | Error::UnsupportedFormat(_) => 1,
    }
}

/// Resolved directories of one invocation.
struct Layout {
    workdir: PathBuf,
    cfg: ExperimentConfig,
}

impl Layout {
    fn new(cli_workdir: Option<PathBuf>, cfg: ExperimentConfig) -> Self {
        let workdir = cli_workdir
            .or_else(|| std::env::var_os("ATKL_WORKDIR").map(PathBuf::from))
            .unwrap_or_else(|| cfg.paths.workdir.clone());
        Layout { workdir, cfg }
    }

    fn under(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn data_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.under(&self.cfg.paths.data))
    }

    fn checkpoint(&self, stem: &str) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints).join(format!("{stem}.ckpt"))
    }

    fn metrics(&self, stem: &str) -> PathBuf {
        self.under(&self.cfg.paths.metrics).join(format!("{stem}.csv"))
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.unwrap_or(self.cfg.seeds[0])
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let load = |p: &Path| ExperimentConfig::load(p);
    let load_opt = |p: Option<&PathBuf>| p.map_or_else(|| Ok(ExperimentConfig::default()), |p| load(p));
    match cli.command {
        Command::InitConfig { out } => {
            if out.exists() {
                return Err(Error::Usage(format!("{} already exists", out.display())));
            }
            fs::write(&out, ExperimentConfig::default().to_toml())?;
            Ok(())
        }
        Command::GenData { config, out } => {
            let layout = Layout::new(cli.workdir, load(&config)?);
            let out = out.unwrap_or_else(|| layout.data_dir(None));
            gen_data(&layout.cfg, &out)
        }
        Command::TrainTeacher { config, seed, data } => {
            let layout = Layout::new(cli.workdir, load(&config)?);
            let seed = layout.seed(seed);
            let data = read_data(&layout.data_dir(data), layout.cfg.data.sample_rate)?;
            let cfg = layout.cfg.teacher.to_model_config()?;
            let mut teacher = build_model::<f32>(&cfg, rng::derive(seed, rng::INIT))?;
            let report = train_teacher(&mut teacher, &data, &layout.cfg.train_config(seed))?;
            finish(&layout, "teacher", &report)
        }
        Command::TrainBaseline { config, seed, data } => {
            let layout = Layout::new(cli.workdir, load(&config)?);
            let seed = layout.seed(seed);
            let data = read_data(&layout.data_dir(data), layout.cfg.data.sample_rate)?;
            let cfg = layout.cfg.student.to_model_config()?;
            let mut student = build_model::<f32>(&cfg, rng::derive(seed, rng::INIT))?;
            let report = train_direct(&mut student, &data, &layout.cfg.train_config(seed))?;
            finish(&layout, &format!("student_direct_s{seed}"), &report)
        }
        Command::Distill { config, mode, seed, data, teacher } => {
            let layout = Layout::new(cli.workdir, load(&config)?);
            let seed = layout.seed(seed);
            let mode = Mode::from(mode);
            let teacher_path = teacher.unwrap_or_else(|| layout.checkpoint("teacher"));
            if !teacher_path.is_file() {
                return Err(Error::Usage(format!("teacher checkpoint {} not found", teacher_path.display())));
            }
            let teacher = load_model(&layout.cfg.teacher.to_model_config()?, &teacher_path)?;
            let data = read_data(&layout.data_dir(data), layout.cfg.data.sample_rate)?;
            let cfg = layout.cfg.student.to_model_config()?;
            let mut student = build_model::<f32>(&cfg, rng::derive(seed, rng::INIT))?;
            let report = run_distillation(
                &teacher,
                &mut student,
                &data,
                &layout.cfg.distill_config(),
                &layout.cfg.train_config(seed),
                mode,
            )?;
            finish(&layout, &format!("student_{}_s{seed}", mode.name()), &report)
        }
        Command::Eval { ckpt, data, config, which, split, clean_input } => {
            let cfg = load_opt(config.as_ref())?;
            let model_cfg = match which {
                Arch::Student => cfg.student.to_model_config()?,
                Arch::Teacher => cfg.teacher.to_model_config()?,
            };
            let model = load_model(&model_cfg, &ckpt)?;
            let clips = read_clips(&data, model_cfg.stft.sample_rate)?;
            let pairs: Vec<(usize, Pair<f32>)> = clips
                .iter()
                .filter(|c| match split {
                    SplitArg::All => true,
                    SplitArg::Train => c.info.split == Split::Train,
                    SplitArg::Val => c.info.split == Split::Val,
                })
                .map(|c| {
                    let clean = Tensor::from_f64(&c.clean, &[c.clean.len()])?;
                    let noisy = if clean_input { clean.clone() } else { Tensor::from_f64(&c.noisy, &[c.noisy.len()])? };
                    Ok((c.info.index, Pair { clean, noisy }))
                })
                .collect::<Result<_>>()?;
            if pairs.is_empty() {
                return Err(Error::Usage("no clips selected for evaluation".into()));
            }
            let scores = evaluate(&model, &pairs.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>())?;
            let stdout = std::io::stdout();
            write_eval_csv(stdout.lock(), &pairs.iter().map(|(i, _)| *i).collect::<Vec<_>>(), &scores)
        }
        Command::CountParams { which, config, desk } => {
            let cfg = load_opt(config.as_ref())?;
            let section = match (which, desk) {
                (CountWhich::Student, false) => &cfg.full_scale.student,
                (CountWhich::Teacher, false) => &cfg.full_scale.teacher,
                (CountWhich::Dccrn, _) => &cfg.full_scale.dccrn,
                (CountWhich::Student, true) => &cfg.student,
                (CountWhich::Teacher, true) => &cfg.teacher,
            };
            println!("{}", count_params(&section.to_model_config()?));
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let cases = run_grad_suite(seed)?;
            let mut failed = Vec::new();
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<32} {:>10.3e}  {status}", c.name, c.max_error);
                if !c.passed() {
                    failed.push(c.name.as_str());
                }
            }
            if failed.is_empty() {
                println!("{} checks passed (tolerance {GRAD_TOL:e})", cases.len());
                Ok(())
            } else {
                Err(Error::Numeric { op: "gradcheck" }).inspect_err(|_| eprintln!("failed: {}", failed.join(", ")))
            }
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let clips = make_dataset(cfg.data.clips, rng::derive(cfg.data.seed, rng::DATA), &cfg.dataset_spec())?;
    fs::create_dir_all(out)?;
    let sr = cfg.data.sample_rate;
    for c in &clips {
        save_wav(out.join(clean_file_name(c.info.index)), &Tensor::<f64>::from_f64(&c.clean, &[c.clean.len()])?, sr)?;
        save_wav(out.join(noisy_file_name(c.info.index)), &Tensor::<f64>::from_f64(&c.noisy, &[c.noisy.len()])?, sr)?;
    }
    let rows: Vec<_> = clips.iter().map(|c| c.info).collect();
    let mut f = BufWriter::new(File::create(out.join(MANIFEST))?);
    write_manifest(&mut f, &rows)?;
    f.flush()?;
    println!("wrote {} clip pairs to {}", clips.len(), out.display());
    Ok(())
}

/// Loads every pair listed in `dir/manifest.csv`.
fn read_clips(dir: &Path, sample_rate: u32) -> Result<Vec<Clip>> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest)
        .map_err(|e| Error::Usage(format!("no dataset at {} ({e}); run gen-data first", manifest.display())))?;
    read_manifest(&text)?
        .into_iter()
        .map(|info| {
            let (clean, sr_c) = load_wav::<f64>(dir.join(clean_file_name(info.index)))?;
            let (noisy, sr_n) = load_wav::<f64>(dir.join(noisy_file_name(info.index)))?;
            if sr_c != sample_rate || sr_n != sample_rate {
                return Err(Error::Config(format!(
                    "clip {} is sampled at {sr_c}/{sr_n} Hz, config expects {sample_rate} Hz",
                    info.index
                )));
            }
            Ok(Clip { info, clean: clean.to_f64_vec(), noisy: noisy.to_f64_vec() })
        })
        .collect()
}

fn read_data(dir: &Path, sample_rate: u32) -> Result<TrainData<f32>> {
    TrainData::from_clips(&read_clips(dir, sample_rate)?)
}

fn load_model(cfg: &ModelConfig, path: &Path) -> Result<Model<f32>> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    let mut model = build_model::<f32>(cfg, 0)?;
    model.load_checkpoint(&ckpt)?;
    model.freeze();
    Ok(model)
}

fn finish(layout: &Layout, stem: &str, report: &TrainReport) -> Result<()> {
    let ckpt = layout.checkpoint(stem);
    let metrics = layout.metrics(stem);
    for p in [&ckpt, &metrics] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
    }
    report.checkpoint.save(&ckpt)?;
    let mut f = BufWriter::new(File::create(&metrics)?);
    write_metrics(&mut f, &report.metrics)?;
    f.flush()?;
    println!(
        "{stem}: final validation SI-SNR {:.3} dB; checkpoint {}; metrics {}",
        report.final_val_sisnr_db,
        ckpt.display(),
        metrics.display()
    );
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn write_eval_csv<W: Write>(mut out: W, ids: &[usize], scores: &[(f64, f64)]) -> Result<()> {
    writeln!(out, "clip,sisnr_noisy_db,sisnr_enhanced_db,delta_db")?;
    for (id, (noisy, enhanced)) in ids.iter().zip(scores) {
        writeln!(out, "{id},{noisy:.6},{enhanced:.6},{:.6}", enhanced - noisy)?;
    }
    let col = |f: fn(&(f64, f64)) -> f64| median(&scores.iter().map(f).collect::<Vec<_>>());
    writeln!(out, "median,{:.6},{:.6},{:.6}", col(|s| s.0), col(|s| s.1), col(|s| s.1 - s.0))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn eval_csv_layout() {
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &[4, 9], &[(1.0, 3.0), (2.0, 7.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "clip,sisnr_noisy_db,sisnr_enhanced_db,delta_db");
        assert_eq!(lines[1], "4,1.000000,3.000000,2.000000");
        assert_eq!(lines[3], "median,1.500000,5.000000,3.500000");
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged { step: 3, detail: "nan".into() }), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }
}
