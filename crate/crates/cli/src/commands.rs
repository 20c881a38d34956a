use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msnerf::encoding::HashGridConfig;
use msnerf::field::FieldConfig;
use msnerf::image_io::{load_manifest, load_spectral_image, save_spectral_image, SceneManifest};
use msnerf::metrics::{evaluate, MetricReport, SsimParams};
use msnerf::model::{Model, ModelConfig};
use msnerf::pointcloud::{
    accuracy_gate, auto_matched_report, export_ply, extract_pointcloud, format_geo_tables, geo_report, import_ply,
    PointCloudError,
};
use msnerf::sampling::ProposalConfig;
use msnerf::synthetic::{gen_dataset, AnalyticScene, OrbitConfig, SceneError};
use msnerf::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use msnerf::training::memory::{
    bytes_per_ray, check_range, estimate_cpu_memory, GpuMemoryModel, HOST_REFERENCES, GB, MODEL_TOLERANCE,
};
use msnerf::training::{BatchScheduler, TrainConfig, TrainError, TrainView, Trainer};

use crate::{BudgetArgs, CliError, EvalGeoArgs, EvalMetricsArgs, ExportArgs, GenSyntheticArgs, RenderArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(m),
        TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn load_views(manifest: &SceneManifest) -> Result<Vec<TrainView>> {
    manifest
        .frames
        .iter()
        .map(|f| {
            Ok(TrainView { camera: f.camera, pose: f.pose, image: load_spectral_image(&f.file).map_err(data)? })
        })
        .collect()
}

fn model_config(a: &TrainArgs, bands: usize) -> ModelConfig {
    let mut field = FieldConfig::full_size(bands);
    field.grid = HashGridConfig {
        levels: a.hash_levels,
        log2_table_size: a.hash_log2_size,
        max_resolution: a.hash_max_resolution,
        ..field.grid
    };
    field.base_hidden_dim = a.hidden_dim;
    field.color_hidden_dim = a.hidden_dim;
    let proposal = ProposalConfig {
        samples_per_round: [a.proposal_samples[0], a.proposal_samples[1]],
        final_samples: a.final_samples,
        ..Default::default()
    };
    ModelConfig { field, proposal }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        rays_per_train_batch: a.train_rays,
        rays_per_eval_batch: a.eval_rays,
        images_per_pool: a.images_per_pool,
        pool_refresh_interval: a.pool_refresh,
        max_steps: a.max_steps,
        grid_lr: a.grid_lr,
        mlp_lr: a.mlp_lr,
        interlevel_weight: a.interlevel_weight,
        seed: a.seed,
        deterministic: a.deterministic,
        gradient_shards: a.gradient_shards,
        ..Default::default()
    }
}

fn print_settings(tc: &TrainConfig, mc: &ModelConfig, views: usize) {
    let f = &mc.field;
    let p = &mc.proposal;
    println!("config views={views} bands={}", f.band_count);
    println!(
        "config field hidden={}/{} geo_features={} hash_levels={} hash_log2_size={} hash_resolution={}..{}",
        f.base_hidden_dim,
        f.color_hidden_dim,
        f.geo_feature_dim,
        f.grid.levels,
        f.grid.log2_table_size,
        f.grid.base_resolution,
        f.grid.max_resolution
    );
    println!(
        "config proposal samples={}/{} hash_resolution={}/{} hash_levels={}/{} final_samples={}",
        p.samples_per_round[0],
        p.samples_per_round[1],
        p.hash_max_resolution[0],
        p.hash_max_resolution[1],
        p.hash_levels[0],
        p.hash_levels[1],
        p.final_samples
    );
    println!(
        "config train_rays={} eval_rays={} images_per_pool={} pool_refresh={} max_steps={} grid_lr={} mlp_lr={} interlevel_weight={} seed={} deterministic={}",
        tc.rays_per_train_batch,
        tc.rays_per_eval_batch,
        tc.images_per_pool.map_or("all".to_string(), |n| n.to_string()),
        tc.pool_refresh_interval.map_or("never".to_string(), |n| n.to_string()),
        tc.max_steps,
        tc.grid_lr,
        tc.mlp_lr,
        tc.interlevel_weight,
        tc.seed,
        tc.deterministic
    );
}

fn write_checkpoint(trainer: &Trainer<f32>, manifest: &SceneManifest, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        bands: manifest.bands.clone(),
        seed: trainer.config.seed,
        step: trainer.step,
        model: trainer.model.clone(),
        adam: trainer.adam.clone(),
    };
    save_checkpoint(&ck, path).map_err(data)?;
    println!("checkpoint step={} path={}", trainer.step, path.display());
    Ok(())
}

/// Renders every frame of `manifest` and scores it against its image.
fn holdout_report(model: &Model<f32>, manifest: &SceneManifest, chunk: usize) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let truth = load_spectral_image(&f.file).map_err(data)?;
        let view = model.render_view(&f.camera, &f.pose, truth.bands().to_vec(), chunk).map_err(data)?;
        reports.push(evaluate(&view.image, &truth, 1.0, &SsimParams::default(), None).map_err(data)?);
    }
    Ok(reports)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest).map_err(data)?;
    let bands = manifest.bands.len();
    if let Some(b) = a.bands {
        if b != bands {
            return Err(CliError::Data(format!("--bands {b} but the dataset has {bands} bands")));
        }
    }
    let tc = train_config(a);
    tc.validate().map_err(train_err)?;
    if a.proposal_samples.len() != 2 {
        return Err(CliError::Config("--proposal-samples takes two comma-separated counts".into()));
    }
    let mc = model_config(a, bands);
    mc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let views = load_views(&manifest)?;
    print_settings(&tc, &mc, views.len());

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(data)?;
            ck.check_band_count(bands).map_err(data)?;
            if ck.model.config != mc {
                return Err(CliError::Config("checkpoint dimensions differ from the requested model".into()));
            }
            let mut t = Trainer::new(tc, ck.model).map_err(train_err)?;
            t.adam = ck.adam;
            t.step = ck.step;
            t
        }
        None => {
            let model = Model::init(mc, manifest.scene_scale, a.seed).map_err(|e| CliError::Config(e.to_string()))?;
            Trainer::new(tc, model).map_err(train_err)?
        }
    };
    let mut scheduler = BatchScheduler::new(views, &tc).map_err(train_err)?;
    fs::create_dir_all(&a.out).map_err(data)?;
    let mut log = File::create(a.out.join("train.log")).map_err(data)?;
    let started = Instant::now();
    while trainer.step < tc.max_steps {
        let batch = scheduler.next_batch();
        let entry = trainer.train_step(&batch).map_err(train_err)?;
        writeln!(log, "{}", entry.loss_columns()).map_err(data)?;
        if entry.step % a.log_every.max(1) == 0 || entry.step == tc.max_steps {
            println!("{entry} elapsed_s={:.1}", started.elapsed().as_secs_f64());
        }
        if a.checkpoint_every > 0 && entry.step % a.checkpoint_every == 0 && entry.step < tc.max_steps {
            write_checkpoint(&trainer, &manifest, &a.out.join(format!("checkpoint_{:06}.msnf", entry.step)))?;
        }
    }
    write_checkpoint(&trainer, &manifest, &a.out.join("final.msnf"))?;
    if let Some(h) = &a.holdout {
        let hm = load_manifest(h).map_err(data)?;
        let reports = holdout_report(&trainer.model, &hm, trainer.config.chunk_rays)?;
        for (i, r) in reports.iter().enumerate() {
            println!("holdout view={i} mse={:.6e} psnr_db={:.3} ssim={:.4}", r.mse, r.psnr_db, r.ssim);
        }
        let json = serde_json::to_string_pretty(&reports).map_err(data)?;
        fs::write(a.out.join("holdout_metrics.json"), json).map_err(data)?;
    }
    Ok(())
}

fn load_for_render(checkpoint: &Path, manifest: &Path) -> Result<(Checkpoint, SceneManifest)> {
    let ck = load_checkpoint(checkpoint).map_err(data)?;
    let m = load_manifest(manifest).map_err(data)?;
    ck.check_band_count(m.bands.len()).map_err(data)?;
    Ok((ck, m))
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let (ck, m) = load_for_render(&a.checkpoint, &a.manifest)?;
    let frames: Vec<usize> = match a.frame {
        Some(i) if i < m.frames.len() => vec![i],
        Some(i) => return Err(CliError::Config(format!("frame {i} out of range, manifest has {}", m.frames.len()))),
        None => (0..m.frames.len()).collect(),
    };
    fs::create_dir_all(&a.out).map_err(data)?;
    for i in frames {
        let f = &m.frames[i];
        let view = ck.model.render_view(&f.camera, &f.pose, ck.bands.clone(), 64).map_err(data)?;
        let path = a.out.join(format!("render_{i:03}.msr"));
        save_spectral_image(&view.image, &path).map_err(data)?;
        println!("render frame={i} path={}", path.display());
        if a.preview {
            let paths = crate::preview::write_band_previews(&view.image, &a.out, &format!("preview_{i:03}"))
                .map_err(data)?;
            println!("preview frame={i} files={} (lossy 8-bit, display only)", paths.len());
        }
    }
    Ok(())
}

pub fn budget(a: &BudgetArgs) -> Result<()> {
    if a.bands == 0 {
        return Err(CliError::Config("bands must be positive".into()));
    }
    if a.images_per_pool > a.images {
        return Err(CliError::Config(format!("pool of {} images exceeds {} images", a.images_per_pool, a.images)));
    }
    let bpr = bytes_per_ray(a.bands);
    let host = estimate_cpu_memory(a.images, a.height, a.width, a.bands, a.images_per_pool, bpr);
    let gpu_model = GpuMemoryModel::reference();
    let gpu = gpu_model.predict(a.train_rays, a.eval_rays, a.samples_per_ray);
    println!("host images={} size={}x{} bands={} pool_images={} bytes_per_ray={bpr}", a.images, a.width, a.height, a.bands, a.images_per_pool);
    for c in host.breakdown.iter().chain(&gpu.breakdown) {
        println!("  {:?} {:<24} {:>10.2} GB", c.device, c.name, c.bytes as f64 / GB);
    }
    println!("cpu_peak {:.2} GB", host.cpu_gb());
    println!(
        "gpu_peak {:.2} GB (train_rays={} eval_rays={} samples_per_ray={} model={:.3} GB per_sample={:.1} B)",
        gpu.gpu_gb(),
        a.train_rays,
        a.eval_rays,
        a.samples_per_ray,
        gpu_model.model_bytes / GB,
        gpu_model.per_sample_bytes
    );
    let mut refs = Vec::new();
    for r in HOST_REFERENCES {
        let b = estimate_cpu_memory(r.images, a.height, a.width, a.bands, r.pool_images, bpr);
        let c = check_range(b.cpu_peak_bytes as f64, r.low, r.high, MODEL_TOLERANCE);
        println!(
            "reference server={}G images={} N={} M={} observed={:.0}~{:.0} GB predicted={:.1} GB gap={:+.1} GB within_tolerance={}",
            r.server_gb,
            r.images,
            r.pool_images,
            r.refresh_interval,
            r.low / GB,
            r.high / GB,
            c.predicted / GB,
            c.gap / GB,
            c.within_tolerance
        );
        refs.push(serde_json::json!({ "reference": r, "estimate": b, "check": c }));
    }
    if a.json {
        let out = serde_json::json!({ "host": host, "gpu": gpu, "gpu_model": gpu_model, "references": refs });
        println!("{}", serde_json::to_string_pretty(&out).map_err(data)?);
    }
    Ok(())
}

pub fn export_pointcloud(a: &ExportArgs) -> Result<()> {
    let (ck, m) = load_for_render(&a.checkpoint, &a.manifest)?;
    let wl = ck.bands.iter().map(|b| b.center_wavelength).collect();
    let cloud = extract_pointcloud(&ck.model, &m.frames, wl, a.stride, a.min_accumulation).map_err(|e| match e {
        PointCloudError::Invalid(m) => CliError::Config(m),
        other => data(other),
    })?;
    export_ply(&cloud, &a.out).map_err(data)?;
    println!("pointcloud points={} path={}", cloud.len(), a.out.display());
    Ok(())
}

pub fn eval_metrics(a: &EvalMetricsArgs) -> Result<()> {
    let pred = load_spectral_image(&a.pred).map_err(data)?;
    let truth = load_spectral_image(&a.truth).map_err(data)?;
    if !(a.max_value > 0.0) {
        return Err(CliError::Config(format!("max value must be positive, got {}", a.max_value)));
    }
    let report = evaluate(&pred, &truth, a.max_value, &SsimParams::default(), None).map_err(data)?;
    let json = serde_json::to_string_pretty(&report).map_err(data)?;
    println!("{json}");
    if let Some(p) = &a.out {
        fs::write(p, &json).map_err(data)?;
    }
    Ok(())
}

pub fn eval_geo(a: &EvalGeoArgs) -> Result<()> {
    let test = import_ply(&a.test_cloud).map_err(data)?.positions();
    let reference = import_ply(&a.reference).map_err(data)?.positions();
    let (report, pairs) = match (a.matched, a.auto_match) {
        (true, None) => (geo_report(&test, &reference).map_err(data)?, test.len()),
        (false, Some(cutoff)) => auto_matched_report(&test, &reference, cutoff).map_err(|e| match e {
            PointCloudError::Invalid(m) => CliError::Config(m),
            other => data(other),
        })?,
        _ => return Err(CliError::Config("choose exactly one of --matched or --auto-match".into())),
    };
    print!("{}", format_geo_tables(&[(a.label.as_str(), &report)]));
    let pass = accuracy_gate(&report);
    println!("pairs={pairs} gate={}", if pass { "pass" } else { "fail" });
    if let Some(p) = &a.json {
        let json = serde_json::json!({ "label": a.label, "pairs": pairs, "pass": pass, "report": report });
        fs::write(p, serde_json::to_string_pretty(&json).map_err(data)?).map_err(data)?;
    }
    Ok(())
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(data)?;
            serde_json::from_str::<AnalyticScene>(&text).map_err(data)?
        }
        None => AnalyticScene::three_spheres(),
    };
    let cfg = OrbitConfig {
        n_views: a.views,
        orbit_radius: a.radius,
        tilt_deg: a.tilt,
        width: a.width,
        height: a.height,
        fov_deg: a.fov,
        scene_scale: a.scene_scale,
        holdout_views: a.holdout_views,
    };
    let ds = gen_dataset(&scene, &cfg, &a.out).map_err(|e| match e {
        SceneError::Invalid(m) => CliError::Config(m),
        other => data(other),
    })?;
    println!("dataset train={}", ds.train.display());
    if let Some(h) = ds.holdout.as_ref().map(PathBuf::as_path) {
        println!("dataset holdout={}", h.display());
    }
    Ok(())
}
