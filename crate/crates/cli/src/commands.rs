use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use hyperunmix::calibration::{apply_calibration, fit_calibration, PanelSample, PanelSpec};
use hyperunmix::classical::reconstruct;
use hyperunmix::envi::{data_path_for, load_envi, save_envi};
use hyperunmix::groundtruth::{class_statistics, classify_cube, resample_outliers, within_variance_check};
use hyperunmix::metrics::{evaluate as score, evaluate_reconstruction, format_table};
use hyperunmix::mixer::mix_cube;
use hyperunmix::neural::{self, load_checkpoint, save_checkpoint, write_trace_csv, UnmixerConfig};
use hyperunmix::render::{plot_endmember_comparison, render_rgb, save_png};
use hyperunmix::unmixer::{Registry, Unmixer, UnetUnmixer};
use hyperunmix::vca::vca_extract;
use hyperunmix::{AbundanceMap, ClassMap, ClassStats, EndmemberSet, Error, HyperCube};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datasets;
use crate::manifest::{file_digest, sha256_hex, Manifest, Seeds};
use crate::InputError;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnmixSummary {
    method: String,
    epochs: usize,
}

#[derive(Debug, Serialize)]
struct ClassifySummary<'a> {
    class_names: &'a [String],
    counts: &'a [usize],
}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Configured path if set (it must exist), else `fallback` under the
    /// output directory if present.
    fn resolve(&self, configured: &[Option<&PathBuf>], fallback: &str, what: &str) -> anyhow::Result<PathBuf> {
        if let Some(p) = configured.iter().flatten().next() {
            if !p.exists() {
                return Err(bad(format!("{what} not found: {}", p.display())));
            }
            return Ok((*p).clone());
        }
        let p = self.out_path(fallback);
        if p.exists() {
            Ok(p)
        } else {
            Err(bad(format!("no {what}: not configured and {} does not exist", p.display())))
        }
    }

    fn optional(&self, configured: Option<&PathBuf>, fallback: &str, what: &str) -> anyhow::Result<Option<PathBuf>> {
        match self.resolve(&[configured], fallback, what) {
            Ok(p) => Ok(Some(p)),
            Err(_) if configured.is_none() => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn note_input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }

    fn note_output(&mut self, p: PathBuf) {
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    /// Header, binary and sidecar files sharing the header's stem.
    fn note_envi(&mut self, header: &Path, output: bool) {
        let mut files = vec![header.to_path_buf()];
        files.extend(data_path_for(header));
        let sidecar = header.with_extension("json");
        if sidecar.is_file() {
            files.push(sidecar);
        }
        for f in files {
            if output {
                self.note_output(f);
            } else {
                self.note_input(&f);
            }
        }
    }

    fn load_cube(&mut self, path: &Path) -> anyhow::Result<HyperCube> {
        let cube = load_envi(path).with_context(|| format!("loading cube {}", path.display()))?;
        self.note_envi(path, false);
        if let Some(d) = &self.cfg.dataset {
            if d.cube_path.as_deref() == Some(path) {
                datasets::check_shape(d, &cube)?;
            }
        }
        Ok(cube)
    }

    fn load_endmembers(&mut self, path: &Path) -> anyhow::Result<EndmemberSet> {
        let set = EndmemberSet::load(path).with_context(|| format!("loading endmembers {}", path.display()))?;
        self.note_input(path);
        Ok(set)
    }

    fn save_cube(&mut self, cube: &HyperCube, name: &str) -> anyhow::Result<()> {
        let p = self.out_path(name);
        save_envi(cube, &p, self.cfg.output_interleave)?;
        self.note_envi(&p, true);
        Ok(())
    }

    fn save_json<T: Serialize>(&mut self, value: &T, name: &str) -> anyhow::Result<()> {
        let p = self.out_path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.note_output(p);
        Ok(())
    }

    fn save_text(&mut self, text: &str, name: &str) -> anyhow::Result<()> {
        let p = self.out_path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.note_output(p);
        Ok(())
    }

    fn dataset_cube(&self) -> Option<&PathBuf> {
        self.cfg.dataset.as_ref().and_then(|d| d.cube_path.as_ref())
    }

    fn reflectance_cube(&self) -> anyhow::Result<PathBuf> {
        let c = &self.cfg;
        self.resolve(&[c.vca.cube.as_ref(), self.dataset_cube()], "reflectance.hdr", "input cube")
    }

    fn unmix_cube(&self) -> anyhow::Result<PathBuf> {
        self.resolve(&[self.cfg.unmix.cube.as_ref(), self.dataset_cube()], "mixed.hdr", "cube to unmix")
    }

    fn label(&self, p: &Path) -> String {
        match p.strip_prefix(&self.out) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => p.display().to_string(),
        }
    }

    pub fn write_manifest(&mut self, command: &str) -> anyhow::Result<()> {
        let inputs = self.inputs.iter().map(|p| file_digest(p, self.label(p))).collect::<anyhow::Result<Vec<_>>>()?;
        let outputs = self.outputs.iter().map(|p| file_digest(p, self.label(p))).collect::<anyhow::Result<Vec<_>>>()?;
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: hyperunmix::VERSION,
            command,
            config_sha256: sha256_hex(&self.cfg.canonical_json()?),
            seeds: Seeds {
                vca: self.cfg.vca.seed,
                classify: self.cfg.classify.seed,
                unmix: self.cfg.unmix.seed,
            },
            inputs,
            outputs,
            config: &self.cfg,
        };
        let p = self.out_path(&format!("manifest_{command}.json"));
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

pub fn calibrate(ctx: &mut Context) -> anyhow::Result<()> {
    let c = ctx.cfg.calibration.clone();
    let need = |p: &Option<PathBuf>, key: &str| -> anyhow::Result<PathBuf> {
        let p = p.clone().ok_or_else(|| bad(format!("calibration.{key} is not set")))?;
        if !p.exists() {
            return Err(bad(format!("calibration.{key} file not found: {}", p.display())));
        }
        Ok(p)
    };
    let (raw_path, dark_path, panels_path) = (need(&c.raw, "raw")?, need(&c.dark, "dark")?, need(&c.panels, "panels")?);
    let text = fs::read_to_string(&panels_path).with_context(|| format!("reading {}", panels_path.display()))?;
    let specs: Vec<PanelSpec> = serde_json::from_str(&text)
        .map_err(|e| bad(format!("invalid panel file {}: {e}", panels_path.display())))?;
    ctx.note_input(&panels_path);
    let raw = ctx.load_cube(&raw_path)?;
    let dark = ctx.load_cube(&dark_path)?;
    let panels = specs.iter().map(|s| PanelSample::from_cube(&raw, s)).collect::<Result<Vec<_>, _>>()?;
    let model = fit_calibration(&dark, &panels)?;
    let reflectance = apply_calibration(&model, &raw)?;
    if reflectance.clipped_count() > 0 {
        log::warn!("{} negative reflectance values clamped to 0", reflectance.clipped_count());
    }
    ctx.save_cube(&reflectance, "reflectance.hdr")?;
    ctx.save_json(&model, "calibration.json")
}

pub fn endmembers(ctx: &mut Context) -> anyhow::Result<()> {
    let path = ctx.reflectance_cube()?;
    let cube = ctx.load_cube(&path)?;
    let set = vca_extract(&cube, ctx.cfg.vca.endmembers, ctx.cfg.vca.seed)?;
    let p = ctx.out_path("endmembers.json");
    set.save(&p)?;
    ctx.note_output(p);
    Ok(())
}

pub fn classify(ctx: &mut Context) -> anyhow::Result<()> {
    let c = ctx.cfg.clone();
    let cube_path = ctx.resolve(&[c.classify.cube.as_ref(), c.vca.cube.as_ref(), ctx.dataset_cube()], "reflectance.hdr", "input cube")?;
    let em_path = ctx.resolve(&[c.classify.endmembers.as_ref()], "endmembers.json", "endmembers")?;
    let cube = ctx.load_cube(&cube_path)?;
    let set = ctx.load_endmembers(&em_path)?;
    let classmap = classify_cube(&cube, &set)?;
    let stats = class_statistics(&cube, &classmap)?;
    let resampled = resample_outliers(&cube, &classmap, &stats, c.classify.sigma_factor, c.classify.seed)?;
    let p = ctx.out_path("classmap.hdr");
    classmap.save(&p)?;
    ctx.note_envi(&p, true);
    let stats_set = stats.to_endmember_set(classmap.class_names.clone(), cube.wavelengths().to_vec())?;
    let p = ctx.out_path("class_stats.json");
    stats_set.save(&p)?;
    ctx.note_output(p);
    ctx.save_json(
        &ClassifySummary {
            class_names: &classmap.class_names,
            counts: &stats.count,
        },
        "classify_summary.json",
    )?;
    ctx.save_cube(&resampled, "resampled.hdr")
}

pub fn mix(ctx: &mut Context) -> anyhow::Result<()> {
    let c = ctx.cfg.mixer.clone();
    let cube_path = ctx.resolve(&[c.cube.as_ref()], "resampled.hdr", "cube to mix")?;
    let map_path = ctx.resolve(&[c.classmap.as_ref()], "classmap.hdr", "class map")?;
    let cube = ctx.load_cube(&cube_path)?;
    let classmap = ClassMap::load(&map_path).with_context(|| format!("loading class map {}", map_path.display()))?;
    ctx.note_envi(&map_path, false);
    let (mixed, abundances) = mix_cube(&cube, &classmap, c.kernel)?;
    ctx.save_cube(&mixed, "mixed.hdr")?;
    let p = ctx.out_path("abundances.hdr");
    abundances.save(&p)?;
    ctx.note_envi(&p, true);
    Ok(())
}

pub fn build_dataset(ctx: &mut Context) -> anyhow::Result<()> {
    endmembers(ctx).context("stage endmembers")?;
    classify(ctx).context("stage classify")?;
    mix(ctx).context("stage mix")
}

fn network_config(ctx: &mut Context, cube: &HyperCube) -> anyhow::Result<UnmixerConfig> {
    let u = ctx.cfg.unmix.clone();
    let mut net = u.network.clone();
    net.bands = cube.bands();
    net.endmembers = u.endmembers;
    net.seed = u.seed;
    if let Some(p) = &u.known_endmembers {
        if !p.exists() {
            return Err(bad(format!("unmix.known_endmembers not found: {}", p.display())));
        }
        let set = ctx.load_endmembers(p)?;
        net.reference_endmembers.get_or_insert(set);
    }
    Ok(net)
}

pub fn train(ctx: &mut Context) -> anyhow::Result<()> {
    let cube_path = ctx.unmix_cube()?;
    let cube = ctx.load_cube(&cube_path)?;
    let mut net = network_config(ctx, &cube)?;
    let state = match ctx.cfg.unmix.checkpoint.clone() {
        Some(p) => {
            if !p.exists() {
                return Err(bad(format!("checkpoint not found: {}", p.display())));
            }
            let s = load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            ctx.note_input(&p);
            let a = &s.config;
            (net.patch_size, net.levels, net.base_channels, net.spectral_channels, net.endmembers) =
                (a.patch_size, a.levels, a.base_channels, a.spectral_channels, a.endmembers);
            s
        }
        None => neural::build(&net)?,
    };
    let trace_path = ctx.out_path("train_trace.csv");
    let (state, report) = match neural::train(state, &cube, &net) {
        Ok(v) => v,
        Err(Error::Diverged { epoch, component, trace }) => {
            write_trace_csv(&trace, &trace_path)?;
            return Err(Error::Diverged { epoch, component, trace })
                .with_context(|| format!("loss trace written to {}", trace_path.display()));
        }
        Err(e) => return Err(e.into()),
    };
    write_trace_csv(&report.loss_trace, &trace_path)?;
    ctx.note_output(trace_path);
    let ckpt = ctx.out_path("model.ckpt");
    save_checkpoint(&state, &ckpt)?;
    ctx.note_output(ckpt);
    log::info!("trained to epoch {} (step {}), converged = {}", state.epoch, state.step, report.converged);
    ctx.save_json(&report, "train_report.json")
}

pub fn unmix(ctx: &mut Context) -> anyhow::Result<()> {
    let cube_path = ctx.unmix_cube()?;
    let cube = ctx.load_cube(&cube_path)?;
    let u = ctx.cfg.unmix.clone();
    let known = match &u.known_endmembers {
        Some(p) if !p.exists() => return Err(bad(format!("unmix.known_endmembers not found: {}", p.display()))),
        Some(p) => Some(ctx.load_endmembers(p)?),
        None => None,
    };
    let strategy: Box<dyn Unmixer> = match (&u.checkpoint, u.method.as_str()) {
        (Some(p), "unet") => {
            if !p.exists() {
                return Err(bad(format!("checkpoint not found: {}", p.display())));
            }
            let state = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            ctx.note_input(p);
            // inference only
            let mut model = UnetUnmixer::from_state(state);
            model.config.max_epochs = model.state.as_ref().map_or(0, |s| s.epoch);
            Box::new(model)
        }
        _ => Registry::default()
            .create(&u.method, &u.settings())
            .map_err(|e| bad(format!("{e}; known methods: {}", Registry::default().names().join(", "))))?,
    };
    let out = strategy.unmix(&cube, known.as_ref())?;
    let p = ctx.out_path("unmix_abundances.hdr");
    out.abundances.save(&p)?;
    ctx.note_envi(&p, true);
    let p = ctx.out_path("unmix_endmembers.json");
    out.endmembers.save(&p)?;
    ctx.note_output(p);
    let mut csv = String::from("index,value\n");
    for (i, v) in out.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{v:e}\n"));
    }
    ctx.save_text(&csv, "unmix_trace.csv")?;
    if let (Some(state), None) = (&out.state, &u.checkpoint) {
        let p = ctx.out_path("unmix_model.ckpt");
        save_checkpoint(state, &p)?;
        ctx.note_output(p);
    }
    ctx.save_json(
        &UnmixSummary {
            method: strategy.name().to_string(),
            epochs: out.epochs,
        },
        "unmix_summary.json",
    )
}

fn write_comparison(ctx: &mut Context, t: usize, name: &str, predicted: &[f64], stats: &ClassStats, wl: &[f64], k: f64) -> anyhow::Result<()> {
    let (mean, sigma) = (stats.mean.row(t).to_vec(), stats.sigma.row(t).to_vec());
    let mut csv = String::from("wavelength,predicted,mean,lower,upper\n");
    for b in 0..mean.len() {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            wl[b],
            predicted[b],
            mean[b],
            mean[b] - k * sigma[b],
            mean[b] + k * sigma[b]
        ));
    }
    let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    ctx.save_text(&csv, &format!("endmember_{t}_{stem}.csv"))?;
    let img = plot_endmember_comparison(predicted, &mean, &sigma, k)?;
    let p = ctx.out_path(&format!("endmember_{t}_{stem}.png"));
    save_png(&img, &p)?;
    ctx.note_output(p);
    Ok(())
}

pub fn evaluate(ctx: &mut Context) -> anyhow::Result<()> {
    let c = ctx.cfg.clone();
    let cube_path = ctx.unmix_cube()?;
    let cube = ctx.load_cube(&cube_path)?;
    let a_path = ctx.resolve(&[c.evaluate.abundances.as_ref()], "unmix_abundances.hdr", "predicted abundances")?;
    let m_path = ctx.resolve(&[c.evaluate.endmembers.as_ref()], "unmix_endmembers.json", "predicted endmembers")?;
    let pred_a = AbundanceMap::load(&a_path).with_context(|| format!("loading {}", a_path.display()))?;
    ctx.note_envi(&a_path, false);
    let pred_m = ctx.load_endmembers(&m_path)?;
    let dataset = c.dataset.as_ref();
    let truth_a_path = ctx.optional(dataset.and_then(|d| d.truth_abundances.as_ref()), "abundances.hdr", "truth abundances")?;
    let truth_m_path = ctx.optional(dataset.and_then(|d| d.truth_endmembers.as_ref()), "class_stats.json", "truth endmembers")?;
    let recon = reconstruct(&pred_a, &pred_m, &cube)?;
    let mut report = match (truth_a_path, truth_m_path) {
        (Some(ap), Some(mp)) => {
            let truth_a = AbundanceMap::load(&ap).with_context(|| format!("loading {}", ap.display()))?;
            ctx.note_envi(&ap, false);
            let truth_m = ctx.load_endmembers(&mp)?;
            let mut report = score(&pred_a, &pred_m, &truth_a, &truth_m, &cube, &recon)?;
            let stats_set = match &c.evaluate.class_stats {
                Some(p) if !p.exists() => return Err(bad(format!("evaluate.class_stats not found: {}", p.display()))),
                Some(p) => Some(ctx.load_endmembers(p)?),
                None => truth_m.band_sigma.is_some().then(|| truth_m.clone()),
            };
            if let Some(set) = stats_set {
                if set.count() != truth_m.count() || set.bands() != truth_m.bands() {
                    bail!(InputError("class statistics do not match the truth endmembers".into()));
                }
                let stats = ClassStats::from_endmember_set(&set)?;
                let k = c.evaluate.sigma_factor;
                for t in 0..truth_m.count() {
                    let p = report.permutation.iter().position(|&x| x == t).expect("permutation");
                    let predicted = pred_m.signature(p).to_vec();
                    report.per_class[t].within_variance = Some(within_variance_check(&predicted, &stats, t, k)?);
                    let name = truth_m.names[t].clone();
                    write_comparison(ctx, t, &name, &predicted, &stats, cube.wavelengths(), k)?;
                }
            }
            report
        }
        _ => {
            log::warn!("no ground truth configured or found; reporting RE only");
            evaluate_reconstruction(&cube, &recon)?
        }
    };
    report.dataset = dataset.map_or_else(|| "cube".to_string(), |d| d.name.clone());
    report.epochs = match c.evaluate.epochs {
        Some(n) => n,
        None => {
            let p = ctx.out_path("unmix_summary.json");
            match fs::read_to_string(&p) {
                Ok(text) => serde_json::from_str::<UnmixSummary>(&text).map(|s| s.epochs).unwrap_or(0),
                Err(_) => 0,
            }
        }
    };
    let json = report.to_json()? + "\n";
    ctx.save_text(&json, "report.json")?;
    let table = format_table(std::slice::from_ref(&report), c.evaluate.with_reference);
    ctx.save_text(&table, "report.txt")?;
    print!("{table}");
    Ok(())
}

pub fn render(ctx: &mut Context) -> anyhow::Result<()> {
    let c = ctx.cfg.clone();
    let path = ctx.resolve(&[c.render.cube.as_ref(), ctx.dataset_cube()], "reflectance.hdr", "cube to render")?;
    let cube = ctx.load_cube(&path)?;
    let stem = path.file_stem().map_or_else(|| "cube".into(), |s| s.to_string_lossy().into_owned());
    let p = ctx.out_path(&format!("{stem}.png"));
    render_rgb(&cube, &p)?;
    ctx.note_output(p);
    Ok(())
}
