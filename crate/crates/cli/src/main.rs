use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use voxfuse::config::Config;
use voxfuse::io::ply::{read_ply, write_ply, PlyData, PlyFormat};
use voxfuse::io::scene::{load_scene, save_scene, Scene};
use voxfuse::io::{read_embedding, read_grid, read_tsdf, write_grid, write_png, write_tsdf};
use voxfuse::pipeline::{build, evaluate, fuse_scene, stitch};
use voxfuse::query::{edit_voxels, mask3d, relevance, render_relevance, transfer_pointcloud, QueryEmbedding};
use voxfuse::synth::{synth_scene, CropSpec, SynthSceneSpec};
use voxfuse::tsdf::extract_mesh;
use voxfuse::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "voxfuse",
    version,
    about = "Sparse voxel feature fusion and open-vocabulary 3D queries"
)]
struct Cli {
    /// Configuration file (TOML key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Override a configuration key, e.g. `--set fusion.batch_size=1024`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Integrate depth, blend levels and voxelize the truncation band.
    Build(BuildArgs),
    /// Extract the zero level set of a TSDF as a PLY mesh.
    Mesh(MeshArgs),
    /// Replace per-view crop features with stitched, refined feature maps.
    Stitch(StitchArgs),
    /// Fuse per-view features into grid voxels.
    Fuse(FuseArgs),
    /// Score voxels against a text embedding; mask, render or edit.
    Query(QueryArgs),
    /// Label a point cloud from fused voxel features.
    Transfer(TransferArgs),
    /// Metrics against the scene's analytic ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    FiveObjects,
    Sphere,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "five-objects")]
    preset: Preset,
    /// Scene spec in TOML; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Emit square crops of this size at 50% overlap instead of full feature maps.
    #[arg(long)]
    crops: Option<usize>,
    /// Override the number of orbit views.
    #[arg(long)]
    views: Option<usize>,
    /// Override the octree level recorded with the scene.
    #[arg(long)]
    level: Option<u32>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output grid.
    #[arg(long)]
    out: PathBuf,
    /// Also write the blended TSDF.
    #[arg(long)]
    tsdf: Option<PathBuf>,
    /// Also write the extracted mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MeshArgs {
    #[arg(long)]
    tsdf: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct StitchArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// Blended TSDF whose mesh supplies occlusion depth.
    #[arg(long)]
    tsdf: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Query embedding file.
    #[arg(long, conflicts_with = "label")]
    embedding: Option<PathBuf>,
    /// Class label looked up in the scene's class manifest.
    #[arg(long, requires = "scene")]
    label: Option<String>,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Threshold on normalized relevance; defaults to `query.threshold`.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write selected voxel centers as a PLY point cloud.
    #[arg(long)]
    mask_ply: Option<PathBuf>,
    /// Write selected voxel keys as text, one `level code x y z` per line.
    #[arg(long)]
    mask_keys: Option<PathBuf>,
    /// Render the relevance map from this scene view into a PNG.
    #[arg(long, requires_all = ["scene", "png"])]
    view: Option<usize>,
    #[arg(long)]
    png: Option<PathBuf>,
    /// Recolor the selected voxels (r,g,b in [0, 1]) and write the grid here.
    #[arg(long, requires = "color")]
    edit_out: Option<PathBuf>,
    #[arg(long, value_parser = parse_rgb)]
    color: Option<[f32; 3]>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Scene providing the class embeddings.
    #[arg(long)]
    scene: PathBuf,
    /// Input points; defaults to the scene's ground-truth points.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// Metrics table; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_rgb(s: &str) -> std::result::Result<[f32; 3], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|c| c.trim().parse::<f32>().map_err(|e| format!("'{c}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => Err("expected three comma-separated values in [0, 1]".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::File {
            path: p.clone(),
            message: e.to_string(),
        })?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(|| dispatch(&cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &Config) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Build(a) => cmd_build(a, cfg),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Stitch(a) => cmd_stitch(a, cfg),
        Command::Fuse(a) => cmd_fuse(a, cfg),
        Command::Query(a) => cmd_query(a, cfg),
        Command::Transfer(a) => cmd_transfer(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::File {
                path: p.clone(),
                message: e.to_string(),
            })?;
            toml::from_str::<SynthSceneSpec>(&text).map_err(|e| Error::File {
                path: p.clone(),
                message: e.to_string(),
            })?
        }
        None => match a.preset {
            Preset::FiveObjects => SynthSceneSpec::five_objects(),
            Preset::Sphere => SynthSceneSpec::sphere(1.0, 32, 7),
        },
    };
    if let Some(n) = a.views {
        spec.orbit.views = n;
    }
    if let Some(l) = a.level {
        spec.level = l;
    }
    if let Some(size) = a.crops {
        spec.crops = Some(CropSpec {
            size,
            stride: (size / 2).max(1),
        });
    }
    let mut scene = synth_scene(&spec, seed)?;
    if spec.crops.is_some() {
        for v in &mut scene.views {
            v.feature = None;
        }
    }
    let manifest = save_scene(&a.out, &scene)?;
    info!("wrote {} views to {}", scene.views.len(), manifest.display());
    Ok(())
}

fn cmd_build(a: &BuildArgs, cfg: &Config) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let out = build(&scene, cfg)?;
    write_grid(&a.out, &out.grid)?;
    info!("wrote {} voxels to {}", out.grid.len(), a.out.display());
    if let Some(p) = &a.tsdf {
        write_tsdf(p, &out.tsdf)?;
    }
    if let Some(p) = &a.mesh {
        write_ply(p, &PlyData::from_mesh(&out.mesh), PlyFormat::Binary)?;
    }
    Ok(())
}

fn cmd_mesh(a: &MeshArgs) -> Result<()> {
    let field = read_tsdf(&a.tsdf)?;
    let mesh = extract_mesh(&field);
    if mesh.is_empty() {
        warn!("TSDF has no zero crossing; writing an empty mesh");
    }
    let fmt = if a.ascii { PlyFormat::Ascii } else { PlyFormat::Binary };
    write_ply(&a.out, &PlyData::from_mesh(&mesh), fmt)?;
    info!("wrote {} triangles to {}", mesh.triangles.len(), a.out.display());
    Ok(())
}

fn cmd_stitch(a: &StitchArgs, cfg: &Config) -> Result<()> {
    let mut scene = load_scene(&a.scene)?;
    let mut stitched = 0;
    for v in &mut scene.views {
        if let Some(crops) = v.crops.take() {
            v.feature = Some(stitch(&crops, v.camera.width, v.camera.height, cfg)?);
            stitched += 1;
        }
    }
    if stitched == 0 {
        warn!("no view carries crops; scene copied unchanged");
    }
    save_scene(&a.out, &scene)?;
    info!("stitched {stitched} views into {}", a.out.display());
    Ok(())
}

fn cmd_fuse(a: &FuseArgs, cfg: &Config) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut grid = read_grid(&a.grid)?;
    let mesh = extract_mesh(&read_tsdf(&a.tsdf)?);
    let stats = fuse_scene(&mut grid, &mesh, &scene, cfg)?;
    for (v, c) in scene.views.iter().zip(&stats.mean_confidence) {
        println!("{}\tmean_confidence\t{c:.6}", v.name);
    }
    println!("unfused_fraction\t{:.6}", stats.unfused_fraction());
    write_grid(&a.out, &grid)?;
    Ok(())
}

fn class_by_label(scene: &Scene, label: &str) -> Result<QueryEmbedding> {
    scene.classes.iter().find(|c| c.label == label).cloned().ok_or_else(|| {
        let known: Vec<&str> = scene.classes.iter().map(|c| c.label.as_str()).collect();
        Error::Config(format!("unknown label '{label}' (known: {})", known.join(", ")))
    })
}

fn cmd_query(a: &QueryArgs, cfg: &Config) -> Result<()> {
    let mut grid = read_grid(&a.grid)?;
    let scene = a.scene.as_deref().map(load_scene).transpose()?;
    let q = match (&a.embedding, &a.label, &scene) {
        (Some(p), _, _) => {
            let label = p
                .file_stem()
                .map_or("query".into(), |s| s.to_string_lossy().into_owned());
            QueryEmbedding::new(label, read_embedding(p)?)?
        }
        (None, Some(l), Some(s)) => class_by_label(s, l)?,
        _ => return Err(Error::Config("query needs --embedding or --label with --scene".into())),
    };
    let res = relevance(&grid, &q)?;
    let threshold = a.threshold.unwrap_or(cfg.query_threshold);
    let mask = mask3d(&grid, &res, threshold);
    println!("{}\tselected\t{}\tof\t{}", q.label, mask.keys.len(), grid.fused_count());
    if let Some(p) = &a.mask_ply {
        write_ply(p, &PlyData::points(&mask.points, None), PlyFormat::Binary)?;
    }
    if let Some(p) = &a.mask_keys {
        let mut text = String::from("# level code x y z\n");
        for k in &mask.keys {
            let [x, y, z] = k.decode();
            text.push_str(&format!("{} {} {x} {y} {z}\n", k.level, k.code));
        }
        write_text(p, &text)?;
    }
    if let (Some(i), Some(png), Some(scene)) = (a.view, &a.png, &scene) {
        let view = scene
            .views
            .get(i)
            .ok_or_else(|| Error::Config(format!("view {i} out of range ({} views)", scene.views.len())))?;
        let map = render_relevance(&grid, &res, &view.camera, &cfg.render)?;
        write_png(png, &map, 0.0, 1.0)?;
    }
    if let (Some(out), Some(color)) = (&a.edit_out, a.color) {
        // Flat colour: the constant band takes the colour, higher bands vanish.
        let n = (grid.sh_degree() as usize + 1).pow(2);
        let mut coeffs = vec![[0.0f32; 3]; n];
        coeffs[0] = color;
        edit_voxels(&mut grid, &mask.keys, &coeffs)?;
        info!("recolored {} voxels into {}", mask.keys.len(), out.display());
        write_grid(out, &grid)?;
    }
    Ok(())
}

fn cmd_transfer(a: &TransferArgs, cfg: &Config) -> Result<()> {
    let grid = read_grid(&a.grid)?;
    let scene = load_scene(&a.scene)?;
    let points = match &a.points {
        Some(p) => read_ply(p)?.vertices,
        None => scene
            .gt_points
            .as_ref()
            .map(|g| g.points.clone())
            .ok_or_else(|| Error::Config("scene has no points; pass --points".into()))?,
    };
    let out = transfer_pointcloud(&grid, &points, &scene.classes, cfg.transfer_k)?;
    let labels = out.labels.iter().map(|l| *l as i32).collect();
    write_ply(&a.out, &PlyData::points(&points, Some(labels)), PlyFormat::Binary)?;
    info!("labeled {} points into {}", points.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, cfg: &Config) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let grid = read_grid(&a.grid)?;
    let table = evaluate(&grid, &scene, cfg)?.to_table();
    match &a.out {
        Some(p) => write_text(p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
