//! Command-line pipeline: phantom generation, forward B1+ simulation,
//! reconstruction, calibration, evaluation, slice export and the gradient
//! self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maxtomo_core::calibration::{calibrate, cross_calibration_scale};
use maxtomo_core::cost::{weights_from_measured, Measurements};
use maxtomo_core::ep::complex_permittivity;
use maxtomo_core::error::Error;
use maxtomo_core::forward::{
    add_peak_snr_noise, b1plus_vie, b1plus_vsie, shim_zero_phase, solve_vie, solve_vsie, B1Set,
    ForwardModel,
};
use maxtomo_core::gmt::{
    build_gradcheck_instance, gradient_fd_check, reconstruct, vie_incident_free_space,
    vie_incident_from_coil, ForwardMode,
};
use maxtomo_core::grid::ComplexVolume;
use maxtomo_core::io::{
    read_b1set, read_epmap, read_volume, slice_volume, write_b1set, write_epmap, write_pgm16,
    write_sidecar, write_trace, write_weights, RunConfig, SliceSidecar, Volume,
};
use maxtomo_core::metrics::{per_compartment_stats, pnae, ssim3d, MetricReport};
use maxtomo_core::phantom::{build_cylinder_phantom, build_layered_sphere_phantom, PhantomSpec};

#[derive(Parser)]
#[command(
    name = "maxtomo",
    about = "Integral-equation forward solver and electrical-property reconstruction",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write an EP map built from the config's phantom section.
    Phantom {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Solve the forward problem and write per-channel B1+ volumes.
    Forward {
        #[arg(short, long)]
        config: PathBuf,
        /// EP map driving the solve (defaults to the config phantom).
        #[arg(long)]
        epmap: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// vie | vsie (defaults to the config's gmt.mode).
        #[arg(long)]
        mode: Option<String>,
        /// Peak SNR of added complex Gaussian noise.
        #[arg(long)]
        noise_snr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero the phase at voxel "i,j,k" in every channel.
        #[arg(long)]
        shim_voxel: Option<String>,
        /// EP map at which VIE incident fields are computed (default: unloaded coil).
        #[arg(long)]
        incident_epmap: Option<PathBuf>,
    },
    /// Reconstruct electrical properties from measured B1+ volumes.
    Reconstruct {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        b1: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Trace table path (default: <out>.trace.tsv).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the config's forward mode.
        #[arg(long)]
        mode: Option<String>,
        /// EP map at which VIE incident fields are computed.
        #[arg(long)]
        incident_epmap: Option<PathBuf>,
        /// EP map supplying the reconstruction mask (default: config phantom).
        #[arg(long)]
        mask_epmap: Option<PathBuf>,
    },
    /// Estimate per-channel complex calibration weights.
    Calibrate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        measured: PathBuf,
        #[arg(long)]
        simulated: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Voltage scaling q * v_target / v_ref applied after the fit.
        #[arg(long)]
        v_target: Option<f64>,
        #[arg(long)]
        v_ref: Option<f64>,
    },
    /// Compare a reconstruction against a truth EP map.
    Evaluate {
        truth: PathBuf,
        recon: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Config with a phantom section enabling per-compartment stats.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export a slice of a volume as 16-bit PGM images plus sidecar JSON.
    ExportSlices {
        volume: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        index: usize,
        /// Output prefix; files are <prefix>_<channel>.pgm/.json.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic cost gradient.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        size: usize,
        /// vie | vsie | both
        #[arg(long, default_value = "both")]
        mode: String,
        /// Enable phase shimming in the checked cost.
        #[arg(long)]
        shim: bool,
        /// Check every n-th masked voxel.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("MAXTOMO_THREADS") {
        match threads.trim().parse::<usize>() {
            Ok(0) => {}
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Err(_) => {
                eprintln!("error: MAXTOMO_THREADS must be a non-negative integer");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Solver { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn build_phantom(cfg: &RunConfig) -> Result<maxtomo_core::ep::EpMap<f64>, Error> {
    let grid = cfg.grid()?;
    let spec = cfg.phantom_spec()?;
    match spec {
        PhantomSpec::LayeredSphere { .. } => build_layered_sphere_phantom(&spec, &grid),
        _ => build_cylinder_phantom(&spec, &grid),
    }
}

fn parse_mode(s: &str) -> Result<ForwardMode, Error> {
    match s {
        "vie" => Ok(ForwardMode::Vie),
        "vsie" => Ok(ForwardMode::Vsie),
        other => Err(Error::invalid(format!("unknown mode {other:?}"))),
    }
}

fn parse_shim_voxel(
    s: &str,
    grid: &maxtomo_core::grid::VoxelGrid<f64>,
) -> Result<usize, Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::invalid("shim voxel must be i,j,k"));
    }
    let idx: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid("shim voxel must be i,j,k"))
        })
        .collect::<Result<_, _>>()?;
    let [nx, ny, nz] = grid.dims();
    if idx[0] >= nx || idx[1] >= ny || idx[2] >= nz {
        return Err(Error::invalid("shim voxel outside the grid"));
    }
    Ok(grid.linear(idx[0], idx[1], idx[2]))
}

fn load_epmap_or_phantom(cfg: &RunConfig, path: Option<&Path>) -> Result<maxtomo_core::ep::EpMap<f64>, Error> {
    match path {
        Some(p) => read_epmap(p),
        None => match &cfg.epmap_path {
            Some(p) => read_epmap(Path::new(p)),
            None => build_phantom(cfg),
        },
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Phantom { config, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let ep = build_phantom(&cfg)?;
            write_epmap(&out, &ep)?;
            println!(
                "wrote {} ({} masked voxels of {})",
                out.display(),
                ep.masked_count(),
                ep.grid.len()
            );
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Forward {
            config,
            epmap,
            out,
            mode,
            noise_snr,
            seed,
            shim_voxel,
            incident_epmap,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let ep = load_epmap_or_phantom(&cfg, epmap.as_deref())?;
            let grid = ep.grid.clone();
            let omega = cfg.omega();
            let coil = cfg.coil()?;
            let channels = coil.channel_count();
            let model = ForwardModel::new(grid.clone(), ep.mask.clone(), omega)?.with_coil(coil)?;
            let eps = complex_permittivity(&ep, omega)?;
            let solver = cfg.solver_config();
            let mode = match mode {
                Some(m) => parse_mode(&m)?,
                None => cfg.forward_mode()?,
            };

            let mut volumes = Vec::with_capacity(channels);
            match mode {
                ForwardMode::Vsie => {
                    for l in 0..channels {
                        let sol = solve_vsie(&model, &eps, l, &solver, None)?;
                        volumes.push(b1plus_vsie(&model, &sol)?.data);
                        log::info!(
                            "channel {l}: {} Krylov iterations, block residual {:.2e}",
                            sol.iterations,
                            sol.residual
                        );
                    }
                }
                ForwardMode::Vie => {
                    let incident = match &incident_epmap {
                        Some(p) => {
                            let inc_ep = read_epmap(p)?;
                            if !inc_ep.grid.same_layout(&grid) {
                                return Err(Error::invalid("incident EP map grid mismatch"));
                            }
                            let inc_eps = complex_permittivity(&inc_ep, omega)?;
                            vie_incident_from_coil(&model, &inc_eps, &solver)?
                        }
                        None => vie_incident_free_space(&model)?,
                    };
                    for (l, inc) in incident.iter().enumerate() {
                        let (j_b, stats) = solve_vie(&model, &eps, &inc.e_inc_masked, &solver, None)?;
                        volumes.push(b1plus_vie(&model, &j_b, &inc.h_inc_tested)?.data);
                        log::info!("channel {l}: {} Krylov iterations", stats.iterations);
                    }
                }
            }

            let mut b1 = B1Set::new(grid.clone(), volumes)?;
            if let Some(sv) = shim_voxel.as_deref() {
                let lin = parse_shim_voxel(sv, &grid)?;
                let mut shimmed = Vec::with_capacity(b1.channels.len());
                for ch in &b1.channels {
                    let vol = ComplexVolume {
                        grid: grid.clone(),
                        data: ch.clone(),
                    };
                    shimmed.push(shim_zero_phase(&vol, lin)?.data);
                }
                b1 = B1Set::new(grid.clone(), shimmed)?;
            }
            let (snr, noise_seed) = match (noise_snr, &cfg.noise) {
                (Some(s), n) => (Some(s), seed.or(n.as_ref().map(|n| n.seed)).unwrap_or(0)),
                (None, Some(n)) => (Some(n.snr), seed.unwrap_or(n.seed)),
                (None, None) => (None, seed.unwrap_or(0)),
            };
            if let Some(snr) = snr {
                b1 = add_peak_snr_noise(&b1, snr, noise_seed)?;
            }
            write_b1set(&out, &b1)?;
            println!("wrote {} ({} channels)", out.display(), b1.channel_count());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Reconstruct {
            config,
            b1,
            out,
            trace,
            mode,
            incident_epmap,
            mask_epmap,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let measured = read_b1set(&b1)?;
            let grid = measured.grid.clone();
            if !grid.same_layout(&cfg.grid()?) {
                return Err(Error::invalid("B1 grid does not match the config grid"));
            }
            let mask_source = load_epmap_or_phantom(&cfg, mask_epmap.as_deref())?;
            if !mask_source.grid.same_layout(&grid) {
                return Err(Error::invalid("mask grid does not match the B1 grid"));
            }
            let omega = cfg.omega();
            let coil = cfg.coil()?;
            let model =
                ForwardModel::new(grid.clone(), mask_source.mask.clone(), omega)?.with_coil(coil)?;
            let mut gmt_cfg = cfg.gmt_config(&grid)?;
            if let Some(m) = mode {
                gmt_cfg.mode = parse_mode(&m)?;
            }
            let weights = weights_from_measured(&measured, &mask_source.mask, gmt_cfg.weight_mode)?;
            let meas = Measurements::new(measured, weights)?;

            let incident = match gmt_cfg.mode {
                ForwardMode::Vie => Some(match &incident_epmap {
                    Some(p) => {
                        let inc_ep = read_epmap(p)?;
                        let inc_eps = complex_permittivity(&inc_ep, omega)?;
                        vie_incident_from_coil(&model, &inc_eps, &gmt_cfg.solver)?
                    }
                    None => {
                        // incident fields at the homogeneous initial guess
                        let mut guess = maxtomo_core::ep::EpMap::vacuum(grid.clone());
                        for v in 0..grid.len() {
                            if mask_source.mask[v] {
                                guess.mask[v] = true;
                                guess.eps_r[v] = gmt_cfg.init_eps_r;
                                guess.sigma_e[v] = gmt_cfg.init_sigma;
                            }
                        }
                        let inc_eps = complex_permittivity(&guess, omega)?;
                        vie_incident_from_coil(&model, &inc_eps, &gmt_cfg.solver)?
                    }
                }),
                ForwardMode::Vsie => None,
            };

            let result = reconstruct(&model, &meas, &gmt_cfg, incident.as_deref(), None)?;
            write_epmap(&out, &result.ep)?;
            let trace_path = trace.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".trace.tsv");
                PathBuf::from(p)
            });
            write_trace(&trace_path, &result.trace)?;
            let last = result.trace.records.last();
            println!(
                "wrote {} and {} ({} iterations, final f = {})",
                out.display(),
                trace_path.display(),
                result.trace.records.len().saturating_sub(1),
                last.map(|r| r.f).unwrap_or(f64::NAN)
            );
            if let Some(msg) = result.aborted {
                eprintln!("reconstruction aborted early: {msg}");
                return Err(Error::solver(msg, f64::NAN));
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Calibrate {
            config,
            measured,
            simulated,
            out,
            v_target,
            v_ref,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let meas = read_b1set(&measured)?;
            let sim = read_b1set(&simulated)?;
            // weights from the simulated maps over the whole volume
            let mask = vec![true; sim.grid.len()];
            let weights = weights_from_measured(&sim, &mask, cfg.weight_mode()?)?;
            let result = calibrate(&meas, &sim, &weights, &cfg.calibration_config())?;
            let q = match (v_target, v_ref) {
                (Some(t), Some(r)) => cross_calibration_scale(&result.weights, t, r)?,
                (None, None) => result.weights.clone(),
                _ => {
                    return Err(Error::invalid(
                        "--v-target and --v-ref must be given together",
                    ))
                }
            };
            write_weights(&out, &q)?;
            println!(
                "wrote {} (residual {:.3e}, {} iterations)",
                out.display(),
                result.residual,
                result.iterations
            );
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Evaluate {
            truth,
            recon,
            out,
            config,
        } => {
            let t = read_epmap(&truth)?;
            let r = read_epmap(&recon)?;
            if !t.grid.same_layout(&r.grid) {
                return Err(Error::invalid("truth and reconstruction grids differ"));
            }
            let (_, mean_e, max_e) = pnae(&t.eps_r, &r.eps_r, &t.mask)?;
            let (_, mean_s, max_s) = pnae(&t.sigma_e, &r.sigma_e, &t.mask)?;
            let ssim_e = ssim3d(&t.grid, &t.eps_r, &r.eps_r, &t.mask).ok();
            let ssim_s = ssim3d(&t.grid, &t.sigma_e, &r.sigma_e, &t.mask).ok();
            let mut report = MetricReport {
                mean_pnae_eps_r: mean_e,
                max_pnae_eps_r: max_e,
                mean_pnae_sigma: mean_s,
                max_pnae_sigma: max_s,
                ssim_eps_r: ssim_e,
                ssim_sigma: ssim_s,
                per_compartment_eps_r: Vec::new(),
                per_compartment_sigma: Vec::new(),
            };
            if let Some(cpath) = config {
                let cfg = RunConfig::from_path(&cpath)?;
                if let Ok(spec) = cfg.phantom_spec() {
                    report.per_compartment_eps_r = per_compartment_stats(&spec, &t.grid, &r.eps_r);
                    report.per_compartment_sigma =
                        per_compartment_stats(&spec, &t.grid, &r.sigma_e);
                }
            }
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(e.to_string()))?;
            println!("{text}");
            if let Some(p) = out {
                std::fs::write(p, text + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::ExportSlices {
            volume,
            axis,
            index,
            out,
        } => {
            let axis_idx = match axis.as_str() {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                other => return Err(Error::invalid(format!("axis must be x|y|z, got {other:?}"))),
            };
            let vol = read_volume(&volume)?;
            let (kind, dims, channels): (&str, [usize; 3], Vec<(String, String, Vec<f64>)>) =
                match &vol {
                    Volume::EpMap(ep) => (
                        "epmap",
                        ep.grid.dims(),
                        vec![
                            ("eps_r".into(), "value".into(), ep.eps_r.clone()),
                            ("sigma".into(), "value".into(), ep.sigma_e.clone()),
                            (
                                "mask".into(),
                                "value".into(),
                                ep.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                            ),
                        ],
                    ),
                    Volume::B1Set(b1) => (
                        "b1set",
                        b1.grid.dims(),
                        b1.channels
                            .iter()
                            .enumerate()
                            .map(|(l, ch)| {
                                (
                                    format!("ch{l}"),
                                    "magnitude".into(),
                                    ch.iter().map(|c| c.norm()).collect(),
                                )
                            })
                            .collect(),
                    ),
                    Volume::Field { grid, channels } => (
                        "field",
                        grid.dims(),
                        channels
                            .iter()
                            .enumerate()
                            .map(|(l, ch)| {
                                (
                                    format!("ch{l}"),
                                    "magnitude".into(),
                                    ch.iter().map(|c| c.norm()).collect(),
                                )
                            })
                            .collect(),
                    ),
                };
            for (ci, (name, component, data)) in channels.iter().enumerate() {
                let (w, h, slice) = slice_volume(dims, data, axis_idx, index)?;
                let pgm = PathBuf::from(format!("{}_{}.pgm", out.display(), name));
                let (lo, hi) = write_pgm16(&pgm, w, h, &slice)?;
                let sidecar = SliceSidecar {
                    source: volume.display().to_string(),
                    kind: kind.to_string(),
                    channel: ci,
                    component: component.clone(),
                    axis: axis.clone(),
                    index,
                    width: w,
                    height: h,
                    value_min: lo,
                    value_max: hi,
                };
                let sc = PathBuf::from(format!("{}_{}.json", out.display(), name));
                write_sidecar(&sc, &sidecar)?;
                println!("wrote {} and {}", pgm.display(), sc.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Gradcheck {
            size,
            mode,
            shim,
            stride,
        } => {
            let modes: Vec<ForwardMode> = match mode.as_str() {
                "vie" => vec![ForwardMode::Vie],
                "vsie" => vec![ForwardMode::Vsie],
                "both" => vec![ForwardMode::Vsie, ForwardMode::Vie],
                other => return Err(Error::invalid(format!("unknown mode {other:?}"))),
            };
            let inst = build_gradcheck_instance::<f64>(size, shim)?;
            let mut worst: f64 = 0.0;
            for m in modes {
                let report = gradient_fd_check(&inst, m, 1e-4, stride)?;
                println!(
                    "{m:?}: max relative gradient error {:.3e} over {} components",
                    report.max_rel_error, report.checked_components
                );
                worst = worst.max(report.max_rel_error);
            }
            if worst < 1e-5 {
                println!("gradcheck PASS (max relative error {worst:.3e} < 1e-5)");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck FAIL (max relative error {worst:.3e} >= 1e-5)");
                Err(Error::solver("gradient check failed", worst))
            }
        }
    }
}
