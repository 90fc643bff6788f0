mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csiforge::autonet::NetConfig;
use csiforge::chansim::{
    generate_dataset, read_dataset, write_dataset, Dataset, GenOptions, RaySet, Sample, SimConfig,
};
use csiforge::codec::CodecConfig;
use csiforge::eval::{parse_rates, rate_sweep, Mode, SweepOptions};
use csiforge::fusion::{FusionConfig, SensorGrid};
use csiforge::quantizer::CsiBitstream;
use csiforge::trainer::{load_checkpoint, save_checkpoint, sensor_grid, train_stage1, train_stage2, TrainConfig};

const OUT_DIR_ENV: &str = "CSIFORGE_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "csiforge",
    version,
    about = "Variable-rate CSI feedback: data, training, coding, evaluation",
    after_help = "Any subcommand accepts --config FILE with `key = value` lines naming its long flags; explicit flags win."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel dataset
    GenData(GenArgs),
    /// Stage 1: train encoder, quantizer and decoder
    Train(TrainArgs),
    /// Stage 2: train the sensor branch on a frozen stage-1 model
    Finetune(FinetuneArgs),
    /// Encode one dataset sample to a bitstream file
    Encode(EncodeArgs),
    /// Decode a bitstream file to a channel record
    Decode(DecodeArgs),
    /// Losses at the given rates
    Eval(EvalArgs),
    /// Full metric grid over rates, SNRs and modes, written as CSV
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

impl Profile {
    fn sim(self) -> SimConfig {
        match self {
            Profile::Desk => SimConfig::desk(),
            Profile::Full => SimConfig::full(),
        }
    }

    fn codec(self) -> CodecConfig {
        match self {
            Profile::Desk => CodecConfig::desk(),
            Profile::Full => CodecConfig {
                net: NetConfig::full(),
                b_max: 3,
                fusion: None,
            },
        }
    }

    fn fusion(self) -> FusionConfig {
        match self {
            Profile::Desk => FusionConfig::desk_uplink(),
            Profile::Full => FusionConfig::full_uplink(),
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs without an explicit path (else $CSIFORGE_OUT_DIR, else .)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn output(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        if let Some(p) = explicit {
            return p.clone();
        }
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        dir.join(default_name)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    los_prob: f64,
    /// Also store the paired uplink channel
    #[arg(long)]
    uplink: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Schedule {
    #[arg(long, default_value = "48,72,96,120,144")]
    rates: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Append per-epoch losses to this CSV
    #[arg(long)]
    log: Option<PathBuf>,
}

impl Schedule {
    fn config(&self, seed: u64) -> Result<TrainConfig, String> {
        Ok(TrainConfig {
            rates: parse_rates(&self.rates).ok_or_else(|| format!("bad rate list {:?}", self.rates))?,
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            val_fraction: self.val_fraction,
            seed,
            log_path: self.log.clone(),
            ..TrainConfig::default()
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    rate: usize,
    /// Corrupt the estimate at this SNR before encoding
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bits: PathBuf,
    /// Sensor grid file for fused decoding
    #[arg(long, conflicts_with = "sensor_from")]
    sensor: Option<PathBuf>,
    /// Dataset whose sample at --index supplies the sensor grid
    #[arg(long)]
    sensor_from: Option<PathBuf>,
    /// Simulator profile recorded with the reconstruction
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "48,72,96,120,144")]
    rates: String,
    #[arg(long, default_value = "csi_only")]
    mode: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "48:144:8")]
    rates: String,
    /// Comma list; "inf" means perfect CSI
    #[arg(long, default_value = "inf")]
    snrs: String,
    /// Comma list of csi_only, fused
    #[arg(long, default_value = "csi_only")]
    modes: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn parse_modes(s: &str) -> Res<Vec<Mode>> {
    s.split(',')
        .map(|m| Mode::parse(m.trim()).ok_or_else(|| format!("unknown mode {m:?}").into()))
        .collect()
}

fn parse_snrs(s: &str) -> Res<Vec<f64>> {
    s.split(',')
        .map(|x| match x.trim() {
            "inf" => Ok(f64::INFINITY),
            v => v.parse::<f64>().map_err(|e| format!("snr {v:?}: {e}").into()),
        })
        .collect()
}

fn all_indices(ds: &Dataset) -> Vec<usize> {
    (0..ds.samples.len()).collect()
}

fn sample_at(ds: &Dataset, index: usize) -> Res<&Sample> {
    ds.samples
        .get(index)
        .ok_or_else(|| format!("index {index} out of range ({} samples)", ds.samples.len()).into())
}

fn gen_data(a: &GenArgs) -> Res<()> {
    let opts = GenOptions {
        count: a.samples,
        seed: a.common.seed,
        los_probability: a.los_prob,
        uplink: a.uplink,
    };
    let ds = generate_dataset(&a.profile.sim(), &opts)?;
    let out = a.common.output(&a.out, "data.bin");
    write_dataset(&out, &ds)?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Res<()> {
    let ds = read_dataset(&a.data)?;
    let cfg = a.schedule.config(a.common.seed)?;
    let (ck, report) = train_stage1(&ds, &a.profile.codec(), &cfg)?;
    let out = a.common.output(&a.out, "stage1.ckpt");
    save_checkpoint(&out, &ck)?;
    println!(
        "best epoch {} (weighted val loss {:.6}); wrote {}",
        report.best_epoch,
        ck.meta.best_val,
        out.display()
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Res<()> {
    let ds = read_dataset(&a.data)?;
    let stage1 = load_checkpoint(&a.stage1)?;
    let cfg = a.schedule.config(a.common.seed)?;
    let (ck, report) = train_stage2(&ds, &stage1, &a.profile.fusion(), &cfg)?;
    let out = a.common.output(&a.out, "stage2.ckpt");
    save_checkpoint(&out, &ck)?;
    println!(
        "best epoch {} (weighted val loss {:.6}); wrote {}",
        report.best_epoch,
        ck.meta.best_val,
        out.display()
    );
    Ok(())
}

fn encode(a: &EncodeArgs) -> Res<()> {
    let (codec, store) = load_checkpoint(&a.checkpoint)?.codec()?;
    let ds = read_dataset(&a.data)?;
    let h = &sample_at(&ds, a.index)?.downlink;
    let h = match a.snr {
        Some(snr) => csiforge::chansim::corrupt_estimate(h, snr, a.common.seed)?,
        None => h.clone(),
    };
    let bits = codec.encode(&store, &h, a.rate)?;
    let out = a.common.output(&a.out, "feedback.csib");
    bits.save(&out)?;
    println!("wrote {} bits to {}", bits.len(), out.display());
    Ok(())
}

fn decode(a: &DecodeArgs) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (codec, store) = ck.codec()?;
    let bits = CsiBitstream::load(&a.bits)?;
    let grid = match (&a.sensor, &a.sensor_from) {
        (Some(p), _) => Some(SensorGrid::load(p).map_err(|e| e.to_string())?),
        (None, Some(p)) => {
            let ds = read_dataset(p)?;
            let f = codec.cfg.fusion.as_ref().ok_or("checkpoint has no sensor branch")?;
            Some(sensor_grid(sample_at(&ds, a.index)?, a.index, f)?)
        }
        (None, None) => None,
    };
    let h = codec.decode(&store, &bits, grid.as_ref())?;
    let sim = a.profile.sim();
    if (sim.n_tx, sim.n_sc) != (h.n_tx(), h.n_sc()) {
        return Err(format!(
            "profile is {}x{}, checkpoint decodes {}x{}",
            sim.n_tx,
            sim.n_sc,
            h.n_tx(),
            h.n_sc()
        )
        .into());
    }
    let record = Dataset {
        config: sim,
        samples: vec![Sample {
            downlink: h,
            uplink: None,
            sensor: None,
            rays: RaySet::default(),
        }],
    };
    let out = a.common.output(&a.out, "reconstruction.bin");
    write_dataset(&out, &record)?;
    println!("wrote reconstruction to {}", out.display());
    Ok(())
}

fn sweep_options(rates: &str, snrs: &str, modes: &str, ds: &Dataset, seed: u64) -> Res<SweepOptions> {
    Ok(SweepOptions {
        rates: parse_rates(rates).ok_or_else(|| format!("bad rate list {rates:?}"))?,
        snrs_db: parse_snrs(snrs)?,
        modes: parse_modes(modes)?,
        indices: all_indices(ds),
        seed,
    })
}

fn eval(a: &EvalArgs) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let opts = sweep_options(&a.rates, "inf", &a.mode, &ds, a.common.seed)?;
    let report = rate_sweep(&ck, &ds, &opts)?;
    println!("mode,rate,mean_loss,loss_db,cosine");
    for r in &report.rows {
        println!(
            "{},{},{:.6},{:.3},{:.6}",
            r.mode.as_str(),
            r.rate,
            r.mean_loss,
            r.loss_db,
            r.cosine
        );
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let opts = sweep_options(&a.rates, &a.snrs, &a.modes, &ds, a.common.seed)?;
    let report = rate_sweep(&ck, &ds, &opts)?;
    let out = a.common.output(&a.out, "sweep.csv");
    std::fs::write(&out, report.to_csv())?;
    std::fs::write(baseline_path(&out), report.baselines_csv())?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn baseline_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    report.with_file_name(format!("{stem}_baselines.csv"))
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
