use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use csu_core::baselines::{self, SunsalOptions, DEFAULT_RHO};
use csu_core::io::{self, FieldKind};
use csu_core::metrics::{evaluate as eval_metrics, EvalReport};
use csu_core::mrf::SweepSchedule;
use csu_core::rng::{substream, Phase};
use csu_core::sampler::{run_chain_with_progress, BetaMode, RunConfig};
use csu_core::synthgen::{self, SceneSpec, DEFAULT_PRIOR_SWEEPS};
use csu_core::{summarize, AbundanceField, BinaryMap, GridGeometry, Library};

use crate::config::{self, write_text, BaselineConfig, Manifest, OneOrMany, SceneConfig, UnmixConfig};
use crate::fail::{usage, CliResult};
use crate::{BaselineArgs, EvaluateArgs, GenerateArgs, RenderArgs, UnmixArgs};

const GRADED_BETA: [f64; 5] = [0.2, 0.275, 0.35, 0.425, 0.5];

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn file_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "field".into())
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let start = Instant::now();
    let mut c: SceneConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => SceneConfig::default(),
    };
    c.rows = a.rows.or(c.rows).or(Some(100));
    c.cols = a.cols.or(c.cols).or(Some(100));
    c.seed = a.seed.or(c.seed).or(Some(0));
    if a.library.is_some() {
        c.library = a.library.clone();
    }
    if a.sigma2.is_some() || a.snr_db.is_some() {
        c.sigma2 = a.sigma2;
        c.snr_db = a.snr_db;
    }
    if c.sigma2.is_some() && c.snr_db.is_some() {
        return Err(usage("give either sigma2 or snr_db, not both"));
    }
    if c.sigma2.is_none() && c.snr_db.is_none() {
        c.sigma2 = Some(8e-4);
    }
    c.prior_sweeps = c.prior_sweeps.or(Some(DEFAULT_PRIOR_SWEEPS));
    let seed = c.seed.unwrap();
    let geom = GridGeometry::new(c.rows.unwrap(), c.cols.unwrap())?;

    let lib = match &c.library {
        Some(p) => {
            c.bands = None;
            c.endmembers = None;
            c.coherence = None;
            io::read_library_csv(p)?
        }
        None => {
            c.bands = c.bands.or(Some(224));
            c.endmembers = c.endmembers.or(Some(5));
            c.coherence = c.coherence.or(Some(0.99));
            let mut rng = substream(seed, Phase::Library, 0, 0);
            synthgen::make_correlated_library(&mut rng, c.bands.unwrap(), c.endmembers.unwrap(), c.coherence.unwrap())?
        }
    };
    let r = lib.endmember_count();
    let default_beta =
        if r == GRADED_BETA.len() { OneOrMany::Many(GRADED_BETA.to_vec()) } else { OneOrMany::One(0.3) };
    let beta = c.beta.get_or_insert(default_beta).expand(r, "beta")?;
    let s = c.s.get_or_insert(OneOrMany::One(0.3)).expand(r, "s")?;

    let mut spec = SceneSpec {
        geom,
        lib: lib.clone(),
        beta,
        s,
        sigma2: vec![0.0; lib.band_count()],
        prior_sweeps: c.prior_sweeps.unwrap(),
        seed,
    };
    let sigma2 = match (c.sigma2, c.snr_db) {
        (Some(v), _) => v,
        (None, Some(db)) => {
            // labels and values use their own streams, so the noiseless draw has the same truth
            let clean = synthgen::generate_scene(&spec)?;
            synthgen::sigma2_for_snr(synthgen::signal_power(&lib, &clean.a_true)?, db)
        }
        (None, None) => unreachable!(),
    };
    spec.sigma2 = vec![sigma2; lib.band_count()];
    let scene = synthgen::generate_scene(&spec)?;
    let snr = synthgen::measure_snr(&scene.cube, &lib, &scene.a_true, Some(&spec.sigma2)).ok();

    make_dir(&a.out)?;
    let mut m = Manifest::new("generate", c.clone());
    if let Some(p) = &c.library {
        m.input("library", p);
    }
    io::write_cube(&a.out.join("cube.csu"), &scene.cube)?;
    io::write_library_csv(&a.out.join("library.csv"), &lib)?;
    io::write_support(&a.out.join("z_true.csu"), geom, &scene.z_true)?;
    io::write_abundances(&a.out.join("a_true.csu"), geom, &scene.a_true)?;
    let mut info = format!("sigma2 = {sigma2:?}\n");
    if let Some(snr) = snr {
        writeln!(info, "snr_db = {snr:?}").unwrap();
    }
    if r >= 2 {
        writeln!(info, "coherence = {:?}", csu_core::types::mutual_coherence(&lib)?).unwrap();
    }
    write_text(&a.out.join("scene.txt"), &info)?;
    for (k, f) in [
        ("cube", "cube.csu"),
        ("library", "library.csv"),
        ("z_true", "z_true.csu"),
        ("a_true", "a_true.csu"),
        ("scene", "scene.txt"),
    ] {
        m.output(k, f);
    }
    m.write(&a.out)?;
    config::write_timings(&a.out, &[("total", start.elapsed().as_secs_f64())])?;
    print!("{info}");
    Ok(())
}

fn parse_schedule(s: &str) -> CliResult<SweepSchedule> {
    match s {
        "raster" => Ok(SweepSchedule::Raster),
        "chromatic" => Ok(SweepSchedule::Chromatic),
        other => Err(usage(format!("unknown schedule '{other}' (raster or chromatic)"))),
    }
}

fn load_inputs(cube: &Path, library: &Path) -> CliResult<(csu_core::HyperCube, Library)> {
    let cube = io::read_cube(cube)?;
    let lib = io::read_library_csv(library)?;
    if cube.band_count() != lib.band_count() {
        return Err(usage(format!(
            "cube has {} bands but the library has {}",
            cube.band_count(),
            lib.band_count()
        )));
    }
    Ok((cube, lib))
}

pub fn unmix(a: &UnmixArgs) -> CliResult<()> {
    let start = Instant::now();
    let (cube, lib) = load_inputs(&a.cube, &a.library)?;
    let r = lib.endmember_count();
    let mut c: UnmixConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => UnmixConfig::default(),
    };
    let d = RunConfig::default();
    c.nmc = a.nmc.or(c.nmc).or(Some(d.n_mc));
    c.nbi = a.nbi.or(c.nbi).or(Some(d.n_bi));
    c.seed = a.seed.or(c.seed).or(Some(d.seed));
    c.thin = a.thin.or(c.thin).or(Some(d.thin));
    c.tmg_sweeps = a.tmg_sweeps.or(c.tmg_sweeps).or(Some(d.tmg_sweeps));
    c.gamma = c.gamma.or(Some(d.gamma));
    c.nu = c.nu.or(Some(d.nu));
    c.schedule = a.schedule.clone().or(c.schedule).or(Some("raster".into()));
    if let Some(b) = &a.beta {
        c.beta = Some(if b.len() == 1 { OneOrMany::One(b[0]) } else { OneOrMany::Many(b.clone()) });
        c.beta_auto = Some(false);
    } else if a.beta_auto {
        c.beta = None;
        c.beta_auto = Some(true);
    }
    if c.beta.is_some() && c.beta_auto == Some(true) {
        return Err(usage("give either fixed beta or beta_auto"));
    }
    c.beta_auto = Some(c.beta.is_none());
    let beta_mode = match &c.beta {
        Some(b) => BetaMode::Fixed(b.expand(r, "beta")?),
        None => BetaMode::self_tuned(),
    };
    let cfg = RunConfig {
        n_mc: c.nmc.unwrap(),
        n_bi: c.nbi.unwrap(),
        gamma: c.gamma.unwrap(),
        nu: c.nu.unwrap(),
        beta_mode,
        seed: c.seed.unwrap(),
        thin: c.thin.unwrap(),
        tmg_sweeps: c.tmg_sweeps.unwrap(),
        schedule: parse_schedule(c.schedule.as_deref().unwrap())?,
        ..RunConfig::default()
    };
    let n_mc = cfg.n_mc;
    let step = (n_mc / 20).max(1);
    let trace = run_chain_with_progress(&cube, &lib, &cfg, |p| {
        if a.progress && p.phase == csu_core::sampler::StepPhase::Beta && p.iteration % step == 0 {
            eprintln!("iteration {}/{n_mc} ({:.1}s)", p.iteration, p.elapsed.as_secs_f64());
        }
    })?;
    let sample_time = start.elapsed().as_secs_f64();
    let res = summarize(&trace)?;
    let geom = cube.geometry();

    make_dir(&a.out)?;
    io::write_support(&a.out.join("z_mmap.csu"), geom, &res.z_mmap)?;
    io::write_abundances(&a.out.join("a_mmse.csu"), geom, &res.a_mmse)?;
    io::write_field(&a.out.join("presence_prob.csu"), FieldKind::Presence, geom, &res.presence_prob)?;
    let counts = nalgebra::DMatrix::from_iterator(1, res.active_count.len(), res.active_count.iter().map(|&c| c as f64));
    io::write_field(&a.out.join("active_count.csu"), FieldKind::Count, geom, &counts)?;

    let mut bt = String::from("iteration");
    for name in lib.names() {
        write!(bt, ",{name}").unwrap();
    }
    bt.push('\n');
    for (i, b) in trace.beta().iter().enumerate() {
        write!(bt, "{}", i + 1).unwrap();
        for v in b {
            write!(bt, ",{v:?}").unwrap();
        }
        bt.push('\n');
    }
    write_text(&a.out.join("beta_trace.csv"), &bt)?;
    let mut sg = String::from("band,sigma2\n");
    for (l, v) in res.sigma2_hat.iter().enumerate() {
        writeln!(sg, "{l},{v:?}").unwrap();
    }
    write_text(&a.out.join("sigma2_mean.csv"), &sg)?;
    let mut summary = String::new();
    writeln!(summary, "beta_hat = {:?}", res.beta_hat).unwrap();
    writeln!(summary, "s2_hat = {:?}", res.s2_hat).unwrap();
    writeln!(summary, "sigma2_hat_mean = {:?}", res.sigma2_hat.iter().sum::<f64>() / res.sigma2_hat.len() as f64)
        .unwrap();
    writeln!(summary, "mmse_fallback_entries = {}", res.fallback_count).unwrap();
    writeln!(summary, "kept_abundance_samples = {}", trace.x_samples().len()).unwrap();
    write_text(&a.out.join("summary.txt"), &summary)?;

    let mut m = Manifest::new("unmix", c);
    m.input("cube", &a.cube);
    m.input("library", &a.library);
    for (k, f) in [
        ("z_mmap", "z_mmap.csu"),
        ("a_mmse", "a_mmse.csu"),
        ("presence_prob", "presence_prob.csu"),
        ("active_count", "active_count.csu"),
        ("beta_trace", "beta_trace.csv"),
        ("sigma2_mean", "sigma2_mean.csv"),
        ("summary", "summary.txt"),
    ] {
        m.output(k, f);
    }
    m.write(&a.out)?;
    config::write_timings(&a.out, &[("sampling", sample_time), ("total", start.elapsed().as_secs_f64())])?;
    print!("{summary}");
    Ok(())
}

pub fn baseline(a: &BaselineArgs) -> CliResult<()> {
    let start = Instant::now();
    let (cube, lib) = load_inputs(&a.cube, &a.library)?;
    let mut c: BaselineConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => BaselineConfig::default(),
    };
    c.method = a.method.clone().or(c.method);
    c.lambda = a.lambda.or(c.lambda);
    c.rho = a.rho.or(c.rho).or(Some(DEFAULT_RHO));
    let method = c.method.clone().ok_or_else(|| usage("--method is required (ncls, oracle-ncls, sunsal)"))?;
    let geom = cube.geometry();
    let mut m = Manifest::new("baseline", c.clone());
    m.input("cube", &a.cube);
    m.input("library", &a.library);
    let res = match method.as_str() {
        "ncls" => {
            c.lambda = None;
            baselines::ncls_cube(&cube, &lib)?
        }
        "oracle-ncls" => {
            let truth = a.truth.as_ref().ok_or_else(|| usage("oracle-ncls needs --truth"))?;
            m.input("truth", truth);
            let (tg, z) = io::read_support(truth)?;
            if tg != geom {
                return Err(usage("truth support grid does not match the cube"));
            }
            baselines::oracle_ncls_cube(&cube, &lib, &z)?
        }
        "sunsal" => {
            let lambda = c.lambda.ok_or_else(|| usage("sunsal needs --lambda"))?;
            let mut opts = SunsalOptions::new(lambda);
            opts.max_iter = c.max_iter.unwrap_or(opts.max_iter);
            opts.tol = c.tol.unwrap_or(opts.tol);
            c.max_iter = Some(opts.max_iter);
            c.tol = Some(opts.tol);
            baselines::sunsal_cube(&cube, &lib, opts)?
        }
        other => return Err(usage(format!("unknown method '{other}' (ncls, oracle-ncls, sunsal)"))),
    };
    m.config = c.clone();
    let z = res.support_at(c.rho.unwrap())?;
    make_dir(&a.out)?;
    let (af, zf) = (format!("a_{method}.csu"), format!("z_{method}.csu"));
    io::write_abundances(&a.out.join(&af), geom, &res.abundances)?;
    io::write_support(&a.out.join(&zf), geom, &z)?;
    let empty = (0..geom.n_pixels()).filter(|&n| z.pixel_mask(n) == 0).count();
    let summary = format!(
        "method = {method}\niterations = {}\nobjective = {:?}\nunconverged_pixels = {}\nempty_support_pixels = {empty}\n",
        res.iterations, res.objective, res.unconverged
    );
    write_text(&a.out.join("summary.txt"), &summary)?;
    m.output("abundance", &af);
    m.output("support", &zf);
    m.output("summary", "summary.txt");
    m.write(&a.out)?;
    config::write_timings(&a.out, &[("total", start.elapsed().as_secs_f64())])?;
    print!("{summary}");
    Ok(())
}

fn read_abundance_on(path: &Path, geom: GridGeometry, r: usize) -> CliResult<AbundanceField> {
    let (g, a) = io::read_abundances(path)?;
    if g != geom || a.n_endmembers() != r {
        return Err(usage(format!("{}: shape does not match the cube and library", path.display())));
    }
    Ok(a)
}

fn read_support_on(path: &Path, geom: GridGeometry, r: usize) -> CliResult<BinaryMap> {
    let (g, z) = io::read_support(path)?;
    if g != geom || z.n_endmembers() != r {
        return Err(usage(format!("{}: shape does not match the cube and library", path.display())));
    }
    Ok(z)
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let (cube, lib) = load_inputs(&a.cube, &a.library)?;
    let (geom, r) = (cube.geometry(), lib.endmember_count());
    if !a.support.is_empty() && a.support.len() != a.estimate.len() {
        return Err(usage("give one --support per --estimate, or none"));
    }
    let a_true = read_abundance_on(&a.truth_abundance, geom, r)?;
    let z_true = a.truth_support.as_ref().map(|p| read_support_on(p, geom, r)).transpose()?;
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (i, est) in a.estimate.iter().enumerate() {
        let a_hat = read_abundance_on(est, geom, r)?;
        let z_hat = a.support.get(i).map(|p| read_support_on(p, geom, r)).transpose()?;
        let rep = eval_metrics(&a_hat, &a_true, &cube, &lib, z_hat.as_ref(), z_true.as_ref())?;
        let mut name = file_name(est);
        if reports.iter().any(|(n, _)| *n == name) {
            name = format!("{name}_{i}");
        }
        reports.push((name, rep));
    }

    make_dir(&a.out)?;
    let mut table = format!("{:<16} {:>14} {:>14} {:>14} {:>10}\n", "estimate", "RMSE (x1e-2)", "AAD (x1e-2)", "RE (x1e-2)", "Hamming");
    let mut kv = String::new();
    let mut csv = String::from("estimate,pixel,rmse,aad,re\n");
    for (name, rep) in &reports {
        let ham = rep.support.as_ref().map_or("-".to_string(), |s| format!("{:.4}", s.hamming_rate));
        writeln!(
            table,
            "{:<16} {:>14.2} {:>14.2} {:>14.2} {:>10}",
            name,
            rep.rmse.mean * 100.0,
            rep.aad.mean * 100.0,
            rep.re.mean * 100.0,
            ham
        )
        .unwrap();
        writeln!(kv, "[{name}]").unwrap();
        kv.push_str(&rep.to_kv_text());
        kv.push('\n');
        for line in rep.to_csv().lines().skip(1) {
            writeln!(csv, "{name},{line}").unwrap();
        }
    }
    write_text(&a.out.join("report.txt"), &kv)?;
    write_text(&a.out.join("report.csv"), &csv)?;
    write_text(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let field = io::read_field(&a.field)?;
    let r = a.endmembers.unwrap_or_else(|| {
        if field.kind == FieldKind::Count {
            field.data.iter().cloned().fold(0.0, f64::max).ceil() as usize
        } else {
            field.data.nrows()
        }
    });
    let stem = a.stem.clone().unwrap_or_else(|| file_name(&a.field));
    let paths = io::render_field(&field, &a.out, &stem, r)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
