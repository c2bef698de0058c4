use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use isogp::baselines::{classical_mds, isomap, stress};
use isogp::dissimilarity::{
    default_lex_radius, euclidean_distances, gen_plane, gen_rotated_glyph, gen_swiss_roll, gen_two_clusters,
    image_euclidean_distances, lexicographic_distances, load_csv_distances, load_csv_points, load_image_stack,
    read_csv_matrix, rotation_invariant_distances, save_csv_matrix, save_csv_with_header, save_image_stack,
    save_points, standardize_columns, DissimilarityMatrix, ImageStack, PointSet,
};
use isogp::geometry::{geodesic, magnification_grid, Geodesic};
use isogp::graph::{build_eps_graph, component_count, connected_components, zero_dim_persistence};
use isogp::model::{fit_with_progress, FitReport, ModelConfig};
use isogp::plot::{render_svg, Scene};
use isogp::Error;

#[derive(Parser)]
#[command(name = "isogp", version, about = "Isometric GP latent variable models for dissimilarity data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Swissroll,
    Glyph,
    Plane,
    TwoClusters,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Euclid,
    Rot,
    Lex,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        dataset: Dataset,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Swiss-roll noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Glyph image side length in pixels.
        #[arg(long, default_value_t = 24)]
        size: usize,
        /// Distance between the two cluster centres.
        #[arg(long, default_value_t = 12.0)]
        separation: f64,
    },
    /// Compute a dissimilarity matrix.
    Dist {
        metric: Metric,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rotation angles for `rot`.
        #[arg(long, default_value_t = 36)]
        angles: usize,
        /// Cross-label distance for `lex`.
        #[arg(long)]
        eps: Option<f64>,
        /// Within-label radius for `lex` (default eps/4).
        #[arg(long)]
        r: Option<f64>,
        /// Standardise point coordinates first.
        #[arg(long)]
        normalize: bool,
    },
    /// Neighborhood graph diagnostics.
    Graph {
        #[arg(long)]
        distances: PathBuf,
        #[arg(long, conflicts_with = "persistence", required_unless_present = "persistence")]
        eps: Option<f64>,
        #[arg(long)]
        persistence: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the model.
    Fit {
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Initial embedding CSV (N rows, q columns) instead of IsoMap.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Geodesic between two latent points of a fitted model.
    Geodesic {
        #[arg(long)]
        report: PathBuf,
        /// Start at the latent mean of this point.
        #[arg(long, conflicts_with = "za")]
        from: Option<usize>,
        #[arg(long, conflicts_with = "zb")]
        to: Option<usize>,
        /// Start coordinates, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        za: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        zb: Option<Vec<f64>>,
        #[arg(long, default_value_t = 20)]
        segments: usize,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Magnification factors on a grid over the latent means.
    MetricGrid {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 50)]
        res: usize,
        #[arg(long, default_value_t = 20)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical MDS and IsoMap baselines.
    Baseline {
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        q: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a fitted embedding as SVG.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Point CSV with a `label` column used for colours.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Magnification background resolution (0 disables).
        #[arg(long, default_value_t = 0)]
        grid_res: usize,
        /// Geodesic CSVs to overlay.
        #[arg(long)]
        geodesic: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_sidecar(path: &Path, v: &Value) -> isogp::Result<()> {
    fs::write(sidecar(path), serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn run(cmd: Command) -> isogp::Result<()> {
    match cmd {
        Command::Gen { dataset, n, seed, out, noise, size, separation } => gen(dataset, n, seed, &out, noise, size, separation),
        Command::Dist { metric, input, out, angles, eps, r, normalize } => {
            let d = dist(metric, &input, angles, eps, r, normalize)?;
            save_csv_matrix(d.values(), &out)?;
            println!("wrote {}x{} {} distances to {}", d.len(), d.len(), metric_name(metric), out.display());
            Ok(())
        }
        Command::Graph { distances, eps, persistence, out } => graph(&distances, eps, persistence, out.as_deref()),
        Command::Fit { distances, config, out, seed, eps, epochs, init, quiet } => {
            fit(&distances, config.as_deref(), &out, seed, eps, epochs, init.as_deref(), quiet)
        }
        Command::Geodesic { report, from, to, za, zb, segments, max_iter, tol, out } => {
            let rep = FitReport::load(&report)?;
            let point = |idx: Option<usize>, z: Option<Vec<f64>>, name: &str| -> isogp::Result<Vec<f64>> {
                match (idx, z) {
                    (Some(i), _) => {
                        if i >= rep.latent.n() {
                            return Err(usage(format!("point {i} out of range for N = {}", rep.latent.n())));
                        }
                        Ok(rep.latent.mu_z.row(i).iter().copied().collect())
                    }
                    (None, Some(z)) => Ok(z),
                    (None, None) => Err(usage(format!("need a point index or coordinates for the {name} endpoint"))),
                }
            };
            let (a, b) = (point(from, za, "start")?, point(to, zb, "end")?);
            let prep = rep.field.prepare()?;
            let g = geodesic(&prep, &a, &b, segments, max_iter, tol)?;
            fs::write(&out, g.to_csv())?;
            println!(
                "geodesic length {:.6} after {} iterations (converged: {}) written to {}",
                g.expected_length,
                g.iterations,
                g.converged,
                out.display()
            );
            Ok(())
        }
        Command::MetricGrid { report, res, mc, seed, out } => {
            let rep = FitReport::load(&report)?;
            let bounds = latent_bounds(&rep.latent.mu_z);
            let grid = magnification_grid(&rep.field.prepare()?, &bounds, res, mc, seed)?;
            fs::write(&out, grid.to_csv())?;
            write_sidecar(&out, &grid.header_json())?;
            println!("wrote {} grid nodes to {}", grid.values.len(), out.display());
            Ok(())
        }
        Command::Baseline { distances, eps, q, out } => baseline(&distances, eps, q, &out),
        Command::Plot { report, labels, grid_res, geodesic, seed, out } => {
            let rep = FitReport::load(&report)?;
            let labels = match labels {
                Some(p) => {
                    let ps = load_csv_points(&p)?;
                    let l = ps.labels().ok_or_else(|| usage(format!("{} has no label column", p.display())))?.to_vec();
                    if l.len() != rep.latent.n() {
                        return Err(usage(format!("{} labels for {} points", l.len(), rep.latent.n())));
                    }
                    Some(l)
                }
                None => None,
            };
            let grid = if grid_res > 0 {
                Some(magnification_grid(&rep.field.prepare()?, &latent_bounds(&rep.latent.mu_z), grid_res, 10, seed)?)
            } else {
                None
            };
            let geodesics = geodesic.iter().map(|p| load_geodesic(p)).collect::<isogp::Result<Vec<_>>>()?;
            let svg = render_svg(&Scene {
                embedding: Some(&rep.latent.mu_z),
                labels: labels.as_deref(),
                grid: grid.as_ref(),
                geodesics: &geodesics,
            });
            fs::write(&out, svg)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Euclid => "euclidean",
        Metric::Rot => "rotation-invariant",
        Metric::Lex => "lexicographic",
    }
}

fn gen(dataset: Dataset, n: Option<usize>, seed: u64, out: &Path, noise: f64, size: usize, separation: f64) -> isogp::Result<()> {
    let n = n.unwrap_or(match dataset {
        Dataset::Swissroll => 300,
        Dataset::Glyph => 72,
        Dataset::Plane => 60,
        Dataset::TwoClusters => 60,
    });
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let truth_json = |truth: &DMatrix<f64>| -> Vec<Vec<f64>> { truth.row_iter().map(|r| r.iter().copied().collect()).collect() };
    match dataset {
        Dataset::Swissroll => {
            let (ps, truth) = gen_swiss_roll(n, noise, seed)?;
            save_points(&ps, out)?;
            write_sidecar(out, &json!({ "dataset": "swissroll", "n": n, "seed": seed, "noise": noise, "truth": truth_json(&truth) }))?;
        }
        Dataset::Plane => {
            let (ps, truth) = gen_plane(n, seed)?;
            save_points(&ps, out)?;
            write_sidecar(out, &json!({ "dataset": "plane", "n": n, "seed": seed, "truth": truth_json(&truth) }))?;
        }
        Dataset::TwoClusters => {
            if n % 2 != 0 {
                return Err(usage("two-clusters needs an even --n"));
            }
            let ps = gen_two_clusters(n / 2, separation, seed)?;
            save_points(&ps, out)?;
            write_sidecar(out, &json!({ "dataset": "two-clusters", "n": n, "seed": seed, "separation": separation }))?;
        }
        Dataset::Glyph => {
            let stack = gen_rotated_glyph(n, size, seed)?;
            save_image_stack(&stack, out)?;
            println!("wrote {n} glyph frames of {size}x{size} pixels to {}", out.display());
            return Ok(());
        }
    }
    println!("wrote {n} points to {}", out.display());
    Ok(())
}

enum Input {
    Points(PointSet),
    Images(ImageStack),
}

fn load_input(path: &Path) -> isogp::Result<Input> {
    let side = sidecar(path);
    if side.exists() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&side)?)?;
        if v.get("height").is_some() {
            return Ok(Input::Images(load_image_stack(path)?));
        }
    }
    Ok(Input::Points(load_csv_points(path)?))
}

fn dist(metric: Metric, input: &Path, angles: usize, eps: Option<f64>, r: Option<f64>, normalize: bool) -> isogp::Result<DissimilarityMatrix> {
    let data = load_input(input)?;
    let base = |data: &Input| -> isogp::Result<DissimilarityMatrix> {
        Ok(match data {
            Input::Points(ps) if normalize => {
                euclidean_distances(&PointSet::new(standardize_columns(ps.points()), ps.labels().map(<[i64]>::to_vec))?)
            }
            Input::Points(ps) => euclidean_distances(ps),
            Input::Images(st) => image_euclidean_distances(st),
        })
    };
    match metric {
        Metric::Euclid => base(&data),
        Metric::Rot => match &data {
            Input::Images(st) => rotation_invariant_distances(st, angles),
            Input::Points(_) => Err(usage("rot needs an image stack input")),
        },
        Metric::Lex => {
            let eps = eps.ok_or_else(|| usage("lex needs --eps"))?;
            let labels = match &data {
                Input::Points(ps) => ps.labels(),
                Input::Images(st) => st.labels(),
            };
            let labels = labels.ok_or_else(|| usage("lex needs labels"))?.to_vec();
            lexicographic_distances(&base(&data)?, Some(&labels), eps, r.unwrap_or_else(|| default_lex_radius(eps)))
        }
    }
}

fn graph(path: &Path, eps: Option<f64>, persistence: bool, out: Option<&Path>) -> isogp::Result<()> {
    let d = load_csv_distances(path)?;
    if persistence {
        let p = zero_dim_persistence(&d);
        if let Some(out) = out {
            fs::write(out, p.to_csv())?;
        }
        println!("{} merge events; final components {}", p.events.len(), p.final_components());
        if let Some(e) = p.eps_for_components(1) {
            println!("smallest eps with one component: {e}");
        }
        return Ok(());
    }
    let eps = eps.expect("clap requires eps without --persistence");
    let g = build_eps_graph(&d, eps)?;
    let c = component_count(&connected_components(&g));
    println!("eps {eps}: {} edges, {c} components", g.edges().len());
    if c == d.len() {
        eprintln!("warning: eps is below every pairwise distance; the graph has {c} components (no edges)");
    } else if c > 1 {
        eprintln!("warning: the graph is disconnected ({c} components)");
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&g.to_json())?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit(
    distances: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    eps: Option<f64>,
    epochs: Option<usize>,
    init: Option<&Path>,
    quiet: bool,
) -> isogp::Result<()> {
    let e = load_csv_distances(distances)?;
    let mut cfg: Value = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|err| usage(format!("config: {err}")))?,
        None => json!({}),
    };
    let obj = cfg.as_object_mut().ok_or_else(|| usage("config must be a JSON object"))?;
    if let Some(v) = eps {
        obj.insert("eps".into(), json!(v));
    }
    if let Some(v) = seed {
        obj.insert("seed".into(), json!(v));
    }
    if let Some(v) = epochs {
        obj.insert("epochs".into(), json!(v));
    }
    let cfg = ModelConfig::from_json(&cfg.to_string())?;
    let init = match init {
        Some(p) => Some(read_csv_matrix(p)?.1),
        None => None,
    };
    fs::create_dir_all(out)?;
    let every = (cfg.epochs / 20).max(1);
    let result = fit_with_progress(&e, &cfg, init.as_ref(), |ep, v| {
        if !quiet && (ep % every == 0 || ep + 1 == cfg.epochs) {
            eprintln!("epoch {ep}: elbo {v:.4}");
        }
    });
    let report = match result {
        Ok(r) => r,
        Err(Error::NonFinite { epoch, reason, dump }) => {
            let path = out.join("abort_dump.json");
            dump.save(&path)?;
            return Err(Error::NonFinite { epoch, reason: format!("{reason}; state written to {}", path.display()), dump });
        }
        Err(err) => return Err(err),
    };
    report.save(&out.join("report.json"))?;
    fs::write(out.join("embedding.csv"), report.embedding_csv())?;
    fs::write(out.join("elbo_trace.csv"), report.trace_csv())?;
    println!(
        "fitted {} points over {} epochs; final elbo {:.4}; outputs in {}",
        e.len(),
        cfg.epochs,
        report.trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn latent_bounds(mu: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..mu.ncols())
        .map(|r| {
            let col = mu.column(r);
            let (lo, hi) = (col.min(), col.max());
            let pad = 0.1 * (hi - lo).max(1e-9);
            (lo - pad, hi + pad)
        })
        .collect()
}

fn load_geodesic(path: &Path) -> isogp::Result<Geodesic> {
    let (_, m) = read_csv_matrix(path)?;
    if m.ncols() < 2 {
        return Err(usage(format!("{} is not a geodesic CSV", path.display())));
    }
    let points = m.row_iter().map(|r| r.iter().skip(1).copied().collect()).collect();
    Ok(Geodesic { points, expected_length: f64::NAN, energy: f64::NAN, iterations: 0, converged: false })
}

fn baseline(distances: &Path, eps: f64, q: usize, out: &Path) -> isogp::Result<()> {
    let d = load_csv_distances(distances)?;
    fs::create_dir_all(out)?;
    let header = |q: usize| -> Vec<String> { std::iter::once("index".to_string()).chain((0..q).map(|r| format!("z{r}"))).collect() };
    let with_index = |z: &DMatrix<f64>, idx: &[usize]| DMatrix::from_fn(z.nrows(), z.ncols() + 1, |i, c| if c == 0 { idx[i] as f64 } else { z[(i, c - 1)] });

    let mds = classical_mds(&d, q)?;
    let all: Vec<usize> = (0..d.len()).collect();
    save_csv_with_header(&with_index(&mds, &all), &header(q), out.join("mds.csv"))?;
    let iso = isomap(&d, eps, q)?;
    save_csv_with_header(&with_index(&iso.embedding, &iso.kept), &header(q), out.join("isomap.csv"))?;
    let s_mds = stress(&d, &mds)?;
    let s_iso = stress(&d.restrict(&iso.kept)?, &iso.embedding)?;
    println!("stress mds {s_mds:.6} isomap {s_iso:.6} (isomap over {} of {} points)", iso.kept.len(), d.len());
    Ok(())
}
