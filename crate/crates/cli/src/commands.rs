use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Deserialize;
use serde_json::Value;

use speckle_ddpm::data::phantom::{make_phantom_volume, PhantomSpec, Speckle};
use speckle_ddpm::data::{
    crop_padding, load_volume, normalize, pad_to_square, save_image, save_volume, DatasetManifest,
    ManifestEntry, VolumeLayout, PAD_VALUE,
};
use speckle_ddpm::fusion::{Bandwidth, ExternalRegistration, FusionConfig, RegistrationMethod};
use speckle_ddpm::sampler::{denoise as run_denoise, sweep_rng, sweep_t, INPUT_TOLERANCE};
use speckle_ddpm::trainer::{write_loss_log, LossWeighting, Trainer};
use speckle_ddpm::{Checkpoint, EpsilonPredictor, Image, NetworkConfig, TrainConfig};

use crate::{
    Classify, CliResult, DenoiseArgs, Failure, ImageInput, MethodKind, NetworkPreset, SelffuseArgs,
    SpeckleKind, SweepArgs, SynthArgs, Tag, TrainArgs, WeightingKind, REGISTER_CMD_ENV,
};

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn create_dir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p)
        .with_context(|| format!("cannot create {}", p.display()))
        .runtime()
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .usage()?;
    serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))
        .usage()
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    if a.count == 0 || a.slices == 0 {
        return Err(usage("--count and --slices must be positive"));
    }
    if a.held_out > a.count {
        return Err(usage("--held-out exceeds --count"));
    }
    let (speckle, label) = match a.speckle {
        SpeckleKind::Gamma => (Speckle::GammaMultiplicative { shape: a.shape }, format!("gamma-k{}", a.shape)),
        SpeckleKind::Gaussian => (Speckle::GaussianAdditive { sigma: a.sigma }, format!("gaussian-s{}", a.sigma)),
        SpeckleKind::None => (Speckle::None, "clean".to_string()),
    };
    for sub in ["noisy", "clean", "rois", "specs"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let stem = format!("vol_{i:04}");
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let spec = PhantomSpec::random(a.size, a.size, speckle, seed);
        let pv = make_phantom_volume(&spec, a.slices, a.max_shift).classify()?;
        let noisy = pv.noisy.with_snr_label(label.clone());
        save_volume(&noisy, &a.out.join("noisy").join(format!("{stem}.raw"))).runtime()?;
        let clean = speckle_ddpm::data::Volume::new(pv.clean).runtime()?;
        save_volume(&clean, &a.out.join("clean").join(format!("{stem}.raw"))).runtime()?;
        spec.rois().save(&a.out.join("rois").join(format!("{stem}.json"))).runtime()?;
        write_json(
            &serde_json::json!({"spec": spec, "shifts": pv.shifts, "reference_slice": a.slices / 2}),
            &a.out.join("specs").join(format!("{stem}.json")),
        )?;
        let mut e = ManifestEntry::new(format!("noisy/{stem}.raw"));
        e.clean = Some(format!("clean/{stem}.raw").into());
        e.snr_label = Some(label.clone());
        e.split = Some(if i >= a.count - a.held_out { "test" } else { "train" }.to_string());
        entries.push(e);
    }
    DatasetManifest::new(entries).save(&a.out.join("manifest.json")).runtime()?;
    log::info!("wrote {} volumes to {}", a.count, a.out.display());
    Ok(())
}

fn fusion_config(a: &SelffuseArgs) -> CliResult<FusionConfig> {
    let mut cfg: FusionConfig = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?)
            .with_context(|| format!("invalid fusion config {}", p.display()))
            .usage()?,
        None => FusionConfig::default(),
    };
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    if let Some(b) = &a.bandwidth {
        cfg.bandwidth = match b.as_str() {
            "auto" => Bandwidth::Auto,
            "uniform" => Bandwidth::Uniform,
            v => Bandwidth::Fixed(v.parse().map_err(|_| usage(format!("bad --bandwidth {v:?}")))?),
        };
    }
    if let Some(m) = a.max_parallel {
        cfg.max_parallel_registrations = m;
    }
    let current_shift = match cfg.registration {
        RegistrationMethod::Translation { max_shift } => max_shift,
        _ => 5,
    };
    match a.method {
        Some(MethodKind::None) => cfg.registration = RegistrationMethod::None,
        Some(MethodKind::Translation) => {
            cfg.registration = RegistrationMethod::Translation { max_shift: current_shift }
        }
        Some(MethodKind::External) => {
            let cmd = a
                .register_cmd
                .clone()
                .or_else(|| std::env::var(REGISTER_CMD_ENV).ok())
                .ok_or_else(|| usage(format!("--method external needs --register-cmd or {REGISTER_CMD_ENV}")))?;
            cfg.registration = RegistrationMethod::External(ExternalRegistration::new(cmd));
        }
        None => {}
    }
    if let (Some(s), RegistrationMethod::Translation { max_shift }) = (a.max_shift, &mut cfg.registration) {
        *max_shift = s;
    }
    cfg.validate().classify()?;
    Ok(cfg)
}

fn fused_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    format!("{stem}_fused.raw")
}

fn fuse_file(path: &Path, layout: &VolumeLayout, cfg: &FusionConfig, out: &Path) -> CliResult<PathBuf> {
    let vol = load_volume(path, layout).classify()?;
    let fused = speckle_ddpm::fuse_volume(&vol, cfg).classify()?;
    let mut v = speckle_ddpm::data::Volume::new(fused).runtime()?;
    v.snr_label = vol.snr_label.map(|l| format!("{l}-fused"));
    let dest = out.join(fused_name(path));
    save_volume(&v, &dest).runtime()?;
    log::info!("fused {} -> {}", path.display(), dest.display());
    Ok(dest)
}

pub fn selffuse(a: SelffuseArgs) -> CliResult<()> {
    let cfg = fusion_config(&a)?;
    create_dir(&a.out)?;
    write_json(&cfg, &a.out.join("fusion_config.json"))?;
    match (&a.volume, &a.manifest) {
        (Some(v), None) => {
            fuse_file(v, &VolumeLayout::default(), &cfg, &a.out)?;
        }
        (None, Some(m)) => {
            let manifest = DatasetManifest::load(m).classify()?;
            let mut entries = Vec::with_capacity(manifest.volumes.len());
            for e in &manifest.volumes {
                let src = manifest.resolve(&e.path);
                let dest = fuse_file(&src, &e.layout(), &cfg, &a.out)?;
                let mut ne = e.clone();
                ne.path = dest.file_name().map(PathBuf::from).unwrap_or(dest.clone());
                ne.format = None;
                ne.repeats_per_location = 1;
                ne.snr_label = e.snr_label.as_ref().map(|l| format!("{l}-fused"));
                ne.clean = e.clean.as_ref().map(|c| absolute(&manifest.resolve(c)));
                entries.push(ne);
            }
            DatasetManifest::new(entries).save(&a.out.join("manifest.json")).runtime()?;
        }
        _ => return Err(usage("give a volume path or --manifest")),
    }
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NetworkSpec {
    Preset(String),
    Explicit(NetworkConfig),
}

fn preset(name: &str) -> CliResult<NetworkConfig> {
    match name {
        "desk" => Ok(NetworkConfig::desk()),
        "paper_scale" | "paper-scale" => Ok(NetworkConfig::paper_scale()),
        "tiny" => Ok(NetworkConfig::tiny()),
        other => Err(usage(format!("unknown network preset {other:?} (desk, paper_scale, tiny)"))),
    }
}

/// Flat JSON: every `TrainConfig` key plus an optional `network` (preset name
/// or explicit object). Unknown keys are rejected.
fn train_config(a: &TrainArgs) -> CliResult<(TrainConfig, Option<NetworkConfig>)> {
    let (mut cfg, mut net) = (TrainConfig::default(), None);
    if let Some(p) = &a.config {
        let mut v = read_json(p)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| usage(format!("{} must hold a JSON object", p.display())))?;
        if let Some(n) = obj.remove("network") {
            let spec: NetworkSpec = serde_json::from_value(n)
                .with_context(|| format!("invalid network in {}", p.display()))
                .usage()?;
            net = Some(match spec {
                NetworkSpec::Preset(s) => preset(&s)?,
                NetworkSpec::Explicit(c) => c,
            });
        }
        let known = serde_json::to_value(TrainConfig::default()).runtime()?;
        if let Some(bad) = obj.keys().find(|k| known.get(k.as_str()).is_none()) {
            return Err(usage(format!("unknown key {bad:?} in {}", p.display())));
        }
        cfg = serde_json::from_value(v)
            .with_context(|| format!("invalid training config {}", p.display()))
            .usage()?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.initial_lr = lr;
    }
    if let Some(p) = a.lr_halving_period {
        cfg.lr_halving_period_epochs = p;
    }
    if let Some(w) = a.loss_weighting {
        cfg.loss_weighting = match w {
            WeightingKind::Simplified => LossWeighting::Simplified,
            WeightingKind::Eq8Weighted => LossWeighting::Eq8Weighted,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.network {
        net = Some(match n {
            NetworkPreset::Desk => NetworkConfig::desk(),
            NetworkPreset::PaperScale => NetworkConfig::paper_scale(),
            NetworkPreset::Tiny => NetworkConfig::tiny(),
        });
    }
    cfg.validate().classify()?;
    Ok((cfg, net))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let (cfg, net_cfg) = train_config(&a)?;
    let manifest = DatasetManifest::load(&a.manifest).classify()?;
    let mut data = Vec::new();
    for e in manifest.volumes.iter().filter(|e| e.split.as_deref().is_none_or(|s| s == a.split)) {
        data.extend(manifest.load_entry(e).classify()?.slices);
    }
    if data.is_empty() {
        return Err(usage(format!("no volumes with split {:?} in {}", a.split, a.manifest.display())));
    }
    if let Some(i) = data.iter().position(|x| !x.is_normalized(INPUT_TOLERANCE)) {
        return Err(usage(format!("training slice {i} is not normalized to [-1, 1]")));
    }
    let state = match &a.resume {
        Some(p) => {
            let mut c = Checkpoint::load(p).classify()?;
            if let Some(n) = net_cfg {
                if n != *c.network_config() {
                    return Err(usage("--network differs from the resumed checkpoint"));
                }
            }
            let epochs = a.epochs.unwrap_or(cfg.epochs);
            c.train.epochs = epochs;
            c
        }
        None => {
            let net = EpsilonPredictor::new(net_cfg.unwrap_or_else(NetworkConfig::desk), cfg.seed).classify()?;
            Checkpoint::new(net, cfg).classify()?
        }
    };
    let (h, w) = data[0].shape();
    state.network_config().check_input(h, w).classify()?;
    log::info!(
        "training on {} slices of {h}x{w}, {} parameters, {} epochs",
        data.len(),
        state.network.parameter_count(),
        state.train.epochs
    );
    let mut trainer = Trainer::new(state).classify()?;
    let log = trainer
        .run(&data, |s, recs| {
            let mean = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len() as f64;
            log::info!("epoch {} loss {mean:.5} lr {:.3e}", s.epoch, recs[0].lr);
        })
        .classify()?;
    let ckpt = trainer.into_checkpoint();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ckpt.save(&a.out).runtime()?;
    let log_path = a.loss_log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_loss_log(&log, &log_path).runtime()?;
    log::info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

struct Prepared {
    model: EpsilonPredictor,
    image: Image,
    padding: Option<speckle_ddpm::data::Padding>,
}

fn prepare(input: &ImageInput) -> CliResult<Prepared> {
    let ckpt = Checkpoint::load(&input.checkpoint).classify()?;
    let vol = load_volume(&input.image, &VolumeLayout::default()).classify()?;
    let mut image = vol
        .slices
        .get(input.slice)
        .cloned()
        .ok_or_else(|| usage(format!("--slice {} out of range ({} slices)", input.slice, vol.len())))?;
    if input.normalize {
        image = normalize(&image).classify()?;
    } else if !image.is_normalized(INPUT_TOLERANCE) {
        let (lo, hi) = image.min_max();
        return Err(usage(format!(
            "{} has values in [{lo}, {hi}]; pass --normalize to map it to [-1, 1]",
            input.image.display()
        )));
    }
    let m = ckpt.network_config().size_multiple();
    let (h, w) = image.shape();
    let padding = if h % m != 0 || w % m != 0 {
        let side = h.max(w).div_ceil(m) * m;
        let (padded, pad) = pad_to_square(&image, side).classify()?;
        log::info!("padded {h}x{w} to {side}x{side} with {PAD_VALUE}");
        image = padded;
        Some(pad)
    } else {
        None
    };
    Ok(Prepared {
        model: ckpt.network,
        image,
        padding,
    })
}

fn finish(p: &Prepared, img: Image) -> CliResult<Image> {
    match &p.padding {
        Some(pad) => crop_padding(&img, pad).runtime(),
        None => Ok(img),
    }
}

pub fn denoise(a: DenoiseArgs) -> CliResult<()> {
    let p = prepare(&a.input)?;
    let sched = speckle_ddpm::VarianceSchedule::oct();
    let sched = match Checkpoint::load(&a.input.checkpoint).classify()?.schedule() {
        Ok(s) => s,
        Err(_) => sched,
    };
    if a.t > sched.steps() {
        return Err(usage(format!("--t {} exceeds the schedule length {}", a.t, sched.steps())));
    }
    let mut rng = sweep_rng(a.input.seed, a.t);
    let out = run_denoise(&p.image, a.t, &p.model, &sched, &mut rng).classify()?;
    let out = finish(&p, out)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&out, &a.out).classify()?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let ext = a.format.to_ascii_lowercase();
    if !["raw", "png", "tif", "tiff"].contains(&ext.as_str()) {
        return Err(usage(format!("unsupported --format {:?} (raw, png, tif)", a.format)));
    }
    let p = prepare(&a.input)?;
    let sched = Checkpoint::load(&a.input.checkpoint).classify()?.schedule().classify()?;
    if let Some(&bad) = a.t_list.iter().find(|&&t| t > sched.steps()) {
        return Err(usage(format!("t = {bad} exceeds the schedule length {}", sched.steps())));
    }
    let results = sweep_t(&p.image, &a.t_list, &p.model, &sched, a.input.seed).classify()?;
    create_dir(&a.out)?;
    let mut rows = Vec::with_capacity(results.len());
    let mut files = Vec::with_capacity(results.len());
    for (t, img) in results {
        let img = finish(&p, img)?;
        let name = format!("t_{t:03}.{ext}");
        save_image(&img, &a.out.join(&name)).classify()?;
        files.push(serde_json::json!({"t": t, "path": name}));
        rows.push(img);
    }
    crate::grid::write_column(&rows, &a.out.join("grid.png")).classify()?;
    write_json(
        &serde_json::json!({"input": a.input.image, "seed": a.input.seed, "images": files, "grid": "grid.png"}),
        &a.out.join("sweep.json"),
    )?;
    log::info!("wrote {} images and grid.png to {}", rows.len(), a.out.display());
    Ok(())
}
