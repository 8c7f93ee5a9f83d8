use std::fs;
use std::path::Path;

use fgrect::bias::{ratio_sweep, BiasSample, DEFAULT_RATIOS};
use fgrect::dataset::{evaluate_dataset, gen_dataset, load_sample, sample_dirs, DatasetConfig};
use fgrect::enhance::enhance;
use fgrect::extract::{
    detect_edges, detect_segments, filter_segments, FilterParams, DEFAULT_HIGH_THRESHOLD, DEFAULT_LOW_THRESHOLD,
};
use fgrect::field::{generate_field, DeformationField, Direction};
use fgrect::io::{load_mask, load_png, save_field, save_lines, save_mask, save_png};
use fgrect::network::{attention_image, forward, NetworkConfig, UpsampleMode, WeightBundle};
use fgrect::optimize::{optimize_field_demo, CoarseBasis, DemoConfig};
use fgrect::synthdoc::{make_sample, render_document, DocumentLayout, SAMPLE_SIZE};
use fgrect::{Error, Raster, Result};
use log::info;
use serde_json::{json, Value};

use crate::config::Overrides;
use crate::{Cli, Command};

/// Default synthetic-sample severity of the optimization demo.
const DEMO_SEVERITY: f64 = 0.3;

pub fn run(cli: Cli) -> Result<Value> {
    let mut o = Overrides::load(cli.common.config.as_deref())?;
    let mut seed = 0u64;
    o.apply("seed", &mut seed)?;
    if let Some(s) = cli.common.seed {
        seed = s;
    }
    match cli.command {
        Command::GenDataset { out, count, severity } => {
            let mut cfg = DatasetConfig { seed, ..DatasetConfig::default() };
            o.apply("count", &mut cfg.count)?;
            o.apply("severity", &mut cfg.severity)?;
            o.apply("size", &mut cfg.size)?;
            o.apply("field_size", &mut cfg.field_size)?;
            o.finish()?;
            cfg.count = count.unwrap_or(cfg.count);
            cfg.severity = severity.unwrap_or(cfg.severity);
            cfg.validate()?;
            if out.exists() && !out.is_dir() {
                return Err(Error::InvalidArgument(format!("{} exists and is not a directory", out.display())));
            }
            let s = gen_dataset(&out, &cfg)?;
            Ok(json!({ "dataset": out, "generated": s.generated, "reused": s.skipped, "samples": cfg.count }))
        }
        Command::ExtractLines { image, out, overlay } => {
            let mut p = FilterParams::default();
            let (mut low, mut high) = (DEFAULT_LOW_THRESHOLD, DEFAULT_HIGH_THRESHOLD);
            o.apply("alpha", &mut p.alpha)?;
            o.apply("beta", &mut p.beta)?;
            o.apply("eps_slope", &mut p.eps_slope)?;
            o.apply("delta", &mut p.delta)?;
            o.apply("edge_low", &mut low)?;
            o.apply("edge_high", &mut high)?;
            o.finish()?;
            input_file(&image)?;
            output_file(&out)?;
            if let Some(p) = &overlay {
                output_file(p)?;
            }
            let img = load_png(&image)?;
            let raw = detect_segments(&detect_edges(&img, low, high)?);
            let kept = filter_segments(&raw, &p)?;
            let lines: Vec<_> = kept.iter().map(|s| s.to_line()).collect();
            save_lines(&out, &lines)?;
            if let Some(path) = overlay {
                save_png(path, &draw_segments(&img, &lines))?;
            }
            Ok(json!({ "detected": raw.len(), "kept": kept.len(), "out": out }))
        }
        Command::Forward { image, weights, out_field, out_mask, dump_attn, save_weights } => {
            let mut cfg = NetworkConfig::default();
            o.apply("sigma", &mut cfg.sigma)?;
            o.apply("gamma", &mut cfg.gamma)?;
            o.apply("spw_window", &mut cfg.spw_window)?;
            o.apply("heads", &mut cfg.heads)?;
            o.apply("d_head", &mut cfg.d_head)?;
            o.apply("feat_channels", &mut cfg.feat_channels)?;
            o.apply("mlp_ratio", &mut cfg.mlp_ratio)?;
            o.apply("mask_bias", &mut cfg.mask_bias)?;
            if let Some(m) = o.take::<UpsampleMode>("upsample")? {
                cfg.upsample = m;
            }
            o.finish()?;
            cfg.validate()?;
            input_file(&image)?;
            if let Some(w) = &weights {
                input_file(w)?;
            }
            for p in
                [Some(&out_field), out_mask.as_ref(), dump_attn.as_ref(), save_weights.as_ref()].into_iter().flatten()
            {
                output_file(p)?;
            }
            let img = to_rgb(load_png(&image)?);
            let bundle = match &weights {
                Some(p) => WeightBundle::load(p)?,
                None => WeightBundle::random(&cfg, seed)?,
            };
            let out = forward(&img, &bundle, &cfg)?;
            save_field(&out_field, &out.field)?;
            if let Some(p) = &out_mask {
                save_mask(p, &out.mask.threshold(0.5))?;
            }
            if let Some(p) = &dump_attn {
                save_png(p, &attention_image(&out.attention, cfg.input_size))?;
            }
            if let Some(p) = &save_weights {
                bundle.save(p)?;
            }
            let rowsum = out
                .encoder_attention
                .iter()
                .chain(&out.decoder_attention)
                .map(|m| m.max_row_sum_error())
                .fold(0.0, f64::max);
            Ok(json!({
                "field": out_field,
                "weights_seed": bundle.seed,
                "parameters": bundle.parameter_count(),
                "foreground_fraction": out.mask.threshold(0.5).mean(),
                "max_attention_row_sum_error": rowsum,
            }))
        }
        Command::Eval { pred_dir, gt_dir, out } => {
            o.finish()?;
            input_dir(&pred_dir)?;
            input_dir(&gt_dir)?;
            output_file(&out)?;
            let report = evaluate_dataset(&pred_dir, &gt_dir)?;
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            Ok(json!({ "samples": report.samples.len(), "mean": report.mean, "out": out }))
        }
        Command::BiasReport { dataset, ratios, out, plot } => {
            let mut list = o.take::<String>("ratios")?;
            o.finish()?;
            if ratios.is_some() {
                list = ratios;
            }
            let ratios = match list {
                Some(s) => parse_ratios(&s)?,
                None => DEFAULT_RATIOS.to_vec(),
            };
            input_dir(&dataset)?;
            output_file(&out)?;
            if let Some(p) = &plot {
                output_file(p)?;
            }
            let mut samples = Vec::new();
            for dir in sample_dirs(&dataset)? {
                let stored = load_sample(&dir)?;
                let doc = stored.meta.render()?;
                samples.push(BiasSample {
                    image: doc.image,
                    mask: doc.mask,
                    lines: doc.lines,
                    bm: stored.sample.target_bm,
                });
            }
            let table = ratio_sweep(&samples, &ratios)?;
            table.save_csv(&out)?;
            if let Some(p) = &plot {
                save_png(p, &table.plot())?;
            }
            Ok(json!({ "rows": table.rows, "violation_rate": table.violation_rate(), "out": out }))
        }
        Command::Enhance { image, mask, out } => {
            o.finish()?;
            input_file(&image)?;
            input_file(&mask)?;
            output_file(&out)?;
            let result = enhance(&load_png(&image)?, &load_mask(&mask)?)?;
            save_png(&out, &result)?;
            Ok(json!({ "out": out }))
        }
        Command::OptimizeDemo { sample, out, out_field, iterations, learning_rate } => {
            let mut cfg = DemoConfig::default();
            let mut severity = DEMO_SEVERITY;
            let mut init = String::from("identity");
            o.apply("iterations", &mut cfg.iterations)?;
            o.apply("learning_rate", &mut cfg.learning_rate)?;
            o.apply("curvature_weight", &mut cfg.curvature_weight)?;
            o.apply("interval", &mut cfg.interval)?;
            o.apply("epsilon", &mut cfg.epsilon)?;
            o.apply("coarse_size", &mut cfg.coarse_size)?;
            if let Some(b) = o.take::<CoarseBasis>("basis")? {
                cfg.basis = b;
            }
            o.apply("severity", &mut severity)?;
            o.apply("init", &mut init)?;
            o.finish()?;
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            if let Some(s) = &sample {
                input_dir(s)?;
            }
            output_file(&out)?;
            if let Some(p) = &out_field {
                output_file(p)?;
            }
            let s = match &sample {
                Some(dir) => load_sample(dir)?.sample,
                None => {
                    let doc = render_document(&DocumentLayout::random(seed, SAMPLE_SIZE, SAMPLE_SIZE)?)?;
                    let bm = generate_field(seed, SAMPLE_SIZE, SAMPLE_SIZE, severity)?;
                    make_sample(&doc, &bm, seed)?.sample
                }
            };
            let start = match init.as_str() {
                "identity" => {
                    DeformationField::identity(s.target_bm.height(), s.target_bm.width(), Direction::Backward)
                }
                "target" => s.target_bm.clone(),
                other => return Err(Error::InvalidArgument(format!("init must be identity or target, got `{other}`"))),
            };
            info!("optimizing over {} lines", s.lines.len());
            let report = optimize_field_demo(&s, &start, &cfg)?;
            let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
            report.write_csv(&mut f)?;
            std::io::Write::flush(&mut f)?;
            if let Some(p) = &out_field {
                save_field(p, &report.field)?;
            }
            let reduction = if report.initial_map_loss() > 0.0 {
                1.0 - report.final_map_loss() / report.initial_map_loss()
            } else {
                0.0
            };
            Ok(json!({
                "config": cfg,
                "lines": s.lines.len(),
                "iterations_run": report.curve.len() - 1,
                "initial_map_loss": report.initial_map_loss(),
                "final_map_loss": report.final_map_loss(),
                "map_loss_reduction": reduction,
                "initial_line_displacement_px": report.initial_displacement,
                "final_line_displacement_px": report.final_displacement,
                "stopped_early": report.converged_early,
                "curve": out,
            }))
        }
    }
}

fn input_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("input file {} does not exist", p.display())))
    }
}

fn input_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("directory {} does not exist", p.display())))
    }
}

fn output_file(p: &Path) -> Result<()> {
    if p.is_dir() {
        return Err(Error::InvalidArgument(format!("output {} is a directory", p.display())));
    }
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(Error::InvalidArgument(format!("output directory {} does not exist", d.display())))
        }
        _ => Ok(()),
    }
}

fn parse_ratios(s: &str) -> Result<Vec<f64>> {
    let ratios = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad ratio `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("ratios must be strictly ascending".into()));
    }
    Ok(ratios)
}

fn to_rgb(r: Raster) -> Raster {
    if r.channels() == 3 {
        return r;
    }
    Raster::from_fn(r.height(), r.width(), 3, |y, x, _| r.get(y, x, 0))
}

fn draw_segments(image: &Raster, lines: &[fgrect::LineElement]) -> Raster {
    let mut out = to_rgb(image.clone());
    let (h, w) = (out.height() as f64, out.width() as f64);
    for line in lines {
        for seg in line.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let n = a.distance(&b).ceil().max(1.0) as usize;
            for k in 0..=n {
                let p = a.lerp(&b, k as f64 / n as f64);
                let (x, y) = (p.x.round(), p.y.round());
                if x >= 0.0 && y >= 0.0 && x < w && y < h {
                    for (c, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                        out.set(y as usize, x as usize, c, v);
                    }
                }
            }
        }
    }
    out
}
