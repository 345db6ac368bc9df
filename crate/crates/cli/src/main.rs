//! `ggs`: command-line front end sequencing the pipeline — synthesize or
//! load a scene, initialize and train a field, render, query, filter grasp
//! proposals, update after object motion, and evaluate.
//!
//! Every failure exits nonzero with a single parsable line on stderr:
//! `error[CODE]: message`. Thread count is controlled by the `GGS_THREADS`
//! environment variable (default: all cores).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ggsplat_core::camera::CameraView;
use ggsplat_core::efd::{Decoder, DECODER_HIDDEN};
use ggsplat_core::error::{Error, Result};
use ggsplat_core::field::{init_from_rgbd, transform_subset};
use ggsplat_core::geometry::build_grasp_cloud;
use ggsplat_core::grasp::{select_grasp, GraspFilterConfig};
use ggsplat_core::hull::convex_hull;
use ggsplat_core::io;
use ggsplat_core::math::Vec3;
use ggsplat_core::query::{
    localization_hit, localize, QueryEmbeddings, RelevanceEvaluator,
    DEFAULT_RELEVANCE_THRESHOLD,
};
use ggsplat_core::raster::{self, ChannelSet, RasterConfig, RenderCamera};
use ggsplat_core::synth::{write_synthetic_scene, SyntheticSceneSpec, CANONICAL_NAMES};
use ggsplat_core::train::{train, TrainConfig, TrainInputs};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "ggs",
    about = "Gaussian feature-field engine: reconstruct, query, grasp, update"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene directory with exact ground truth.
    Synth(SynthArgs),
    /// Initialize a field checkpoint from a scene's RGB-D views.
    Init(InitArgs),
    /// Optimize a field (and feature decoder) against a scene.
    Train(TrainArgs),
    /// Render one view of a checkpoint to image/feature files.
    Render(RenderArgs),
    /// Score an embedding query: relevance maps plus a 3D localization.
    Query(QueryArgs),
    /// Keep force-closure-feasible grasp proposals; pick the best score.
    GraspFilter(GraspFilterArgs),
    /// Rigidly move a hull selection, then fine-tune from a views subset.
    Update(UpdateArgs),
    /// Report mIoU, localization accuracy, and per-query latency.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output scene directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Number of floating objects (1-6); a table is always added.
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera count on the ring.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long)]
    d_clip: Option<usize>,
    /// Gaussian depth noise sigma in meters.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    /// Gaussian color noise sigma in [0,1] units.
    #[arg(long, default_value_t = 0.0)]
    color_noise: f64,
}

#[derive(Args)]
struct InitArgs {
    /// Scene manifest path.
    #[arg(long)]
    scene: PathBuf,
    /// Output field checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    target_count: usize,
    #[arg(long, default_value_t = 16)]
    d_latent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Input field checkpoint (e.g. from `init`).
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_decoder: PathBuf,
    /// Loss-curve CSV output.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Key-value config file; keys match the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from an existing decoder instead of a fresh one.
    #[arg(long)]
    decoder_in: Option<PathBuf>,
    /// Enable low-opacity pruning.
    #[arg(long)]
    prune: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    field: PathBuf,
    /// Which manifest view's camera to render.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Output path prefix; writes <prefix>_color.png, _depth.png,
    /// _normal.png, _feature.ggfm for the selected channels.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Comma list from: color, depth, normal, feature.
    #[arg(long, default_value = "color,depth")]
    channels: String,
    #[arg(long, default_value_t = 3)]
    sh_degree: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Name of an embedding entry (e.g. obj1).
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = DEFAULT_RELEVANCE_THRESHOLD)]
    threshold: f64,
    /// Comma list of view indices to score (default: all).
    #[arg(long)]
    views: Option<String>,
    /// Output prefix; writes per-view <prefix>_vNN_relevance.png + .ggfm
    /// sidecars and <prefix>_result.json.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct GraspFilterArgs {
    /// Proposal JSON array (pose, width, height, depth, score, contacts?).
    #[arg(long)]
    proposals: PathBuf,
    /// Annotated, filtered proposal JSON output (score-descending).
    #[arg(long)]
    out: PathBuf,
    /// Surface cloud with normals (PLY). Either this or --scene + --field +
    /// --decoder + --query, which builds the cloud by localization.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = DEFAULT_RELEVANCE_THRESHOLD)]
    threshold: f64,
    /// Force-closure angle-sum threshold in radians.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_3)]
    angle_threshold: f64,
    /// Contact-normal lookup radius in meters.
    #[arg(long, default_value_t = 0.005)]
    radius: f64,
    /// Also export the grasp cloud used for normal lookup.
    #[arg(long)]
    export_cloud: Option<PathBuf>,
}

#[derive(Args)]
struct UpdateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    /// Rigid transform JSON ({"matrix": [16 row-major floats]}).
    #[arg(long)]
    transform: PathBuf,
    /// Query-result JSON whose hull selects the primitives to move.
    #[arg(long)]
    selection: PathBuf,
    /// Decoder checkpoint; required when feature losses are enabled.
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    out_decoder: Option<PathBuf>,
    /// Comma list of view indices for fine-tuning (default: 5 spread out).
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration budget of the original training run; fine-tuning runs a
    /// tenth of it. 0 skips optimization entirely.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RELEVANCE_THRESHOLD)]
    threshold: f64,
    /// Comma list of query names (default: every obj* entry).
    #[arg(long)]
    queries: Option<String>,
    /// JSON report output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    if let Err(msg) = configure_threads() {
        eprintln!("error[ParseError]: {msg}");
        return ExitCode::FAILURE;
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    match std::env::var("GGS_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("thread pool: {e}")),
            _ => Err(format!("GGS_THREADS must be a positive integer, got '{v}'")),
        },
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Init(a) => cmd_init(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::GraspFilter(a) => cmd_grasp_filter(a),
        Cmd::Update(a) => cmd_update(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn parse_indices(list: &str, len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let i: usize = part.trim().parse().map_err(|_| {
            Error::ParseError {
                path: "--views".into(),
                detail: format!("'{part}' is not an index"),
            }
        })?;
        if i >= len {
            return Err(Error::DegenerateInput(format!(
                "view index {i} out of range (scene has {len} views)"
            )));
        }
        out.push(i);
    }
    if out.is_empty() {
        return Err(Error::DegenerateInput("empty view list".into()));
    }
    Ok(out)
}

/// Query + canonical embeddings by name from a scene's entry list.
fn query_embeddings(
    entries: &[(String, Vec<f32>)],
    name: &str,
) -> Result<QueryEmbeddings<f32>> {
    let query = entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v.clone())
        .ok_or_else(|| {
            Error::DegenerateInput(format!("no embedding entry named '{name}'"))
        })?;
    let canonical: Vec<Vec<f32>> = CANONICAL_NAMES
        .iter()
        .filter_map(|cn| entries.iter().find(|(n, _)| n == cn).map(|(_, v)| v.clone()))
        .collect();
    if canonical.is_empty() {
        return Err(Error::DegenerateInput(
            "embedding file has no canonical entries (object/things/stuff/texture)".into(),
        ));
    }
    let embeddings = QueryEmbeddings { query, canonical };
    embeddings.validate()?;
    Ok(embeddings)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSceneSpec::demo(a.objects, a.seed);
    if let Some(v) = a.views {
        spec.ring.count = v;
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(f) = a.focal {
        spec.focal_px = f;
    }
    if let Some(d) = a.d_clip {
        spec.d_clip = d;
    }
    spec.depth_noise_m = a.depth_noise;
    spec.color_noise = a.color_noise;
    let manifest = write_synthetic_scene(&a.out, &spec)?;
    println!("wrote scene: {}", manifest.display());
    Ok(())
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let data = io::load_scene::<f32>(&a.scene)?;
    let field = init_from_rgbd(&data.views, a.target_count, a.d_latent, a.seed)?;
    io::write_field(&a.out, &field)?;
    println!("initialized {} primitives -> {}", field.len(), a.out.display());
    Ok(())
}

fn load_train_config(
    config: &Option<PathBuf>,
    iterations: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => io::read_train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = io::load_scene::<f32>(&a.scene)?;
    let field = io::read_field::<f32>(&a.field)?;
    let mut cfg = load_train_config(&a.config, a.iterations, a.seed)?;
    cfg.prune = cfg.prune || a.prune;
    let decoder = match &a.decoder_in {
        Some(path) => io::read_decoder::<f32>(path)?,
        None => {
            let d_clip = data
                .embedding_entries
                .first()
                .map(|(_, v)| v.len())
                .ok_or_else(|| Error::DegenerateInput("scene has no embeddings".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Decoder::init(field.d_latent, DECODER_HIDDEN, d_clip, &mut rng)
        }
    };
    let inputs = TrainInputs {
        views: &data.views,
        instances: &data.instances,
        embeddings: &data.instance_embeddings,
    };
    let result = train(field, decoder, &inputs, &cfg)?;
    io::write_field(&a.out_field, &result.field)?;
    io::write_decoder(&a.out_decoder, &result.decoder)?;
    if let Some(csv) = &a.out_csv {
        io::write_loss_csv(csv, &result.reports)?;
    }
    if let Some(last) = result.reports.last() {
        println!(
            "iteration {}: total loss {:.6} ({} primitives)",
            last.iteration,
            last.total,
            result.field.len()
        );
    }
    println!("wrote {}", a.out_field.display());
    if let Some(div) = result.diverged {
        // Outputs hold the last finite state; still fail loudly.
        return Err(Error::DivergenceDetected { iteration: div.iteration });
    }
    Ok(())
}

fn parse_channels(list: &str) -> Result<ChannelSet> {
    let mut ch = ChannelSet::default();
    for part in list.split(',') {
        match part.trim() {
            "color" => ch.color = true,
            "depth" => ch.depth = true,
            "normal" => ch.normal = true,
            "feature" => ch.feature = true,
            other => {
                return Err(Error::ParseError {
                    path: "--channels".into(),
                    detail: format!("unknown channel '{other}'"),
                })
            }
        }
    }
    Ok(ch)
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let data = io::load_scene::<f32>(&a.scene)?;
    let field = io::read_field::<f32>(&a.field)?;
    if a.view >= data.views.len() {
        return Err(Error::DegenerateInput(format!(
            "view index {} out of range (scene has {} views)",
            a.view,
            data.views.len()
        )));
    }
    let channels = parse_channels(&a.channels)?;
    let cfg = RasterConfig { sh_degree: a.sh_degree, ..Default::default() };
    let cam = RenderCamera::of_view(&data.views[a.view]);
    let cache = raster::project(&field, &cam, &cfg);
    let (out, _) = raster::render_forward(&field, &cam, channels, &cache, &cfg);
    if let Some(color) = &out.color {
        io::write_color_png(&suffixed(&a.out_prefix, "_color.png"), color)?;
    }
    if let Some(depth) = &out.depth {
        io::write_depth_png(
            &suffixed(&a.out_prefix, "_depth.png"),
            depth,
            data.manifest.depth_scale_mm,
        )?;
    }
    if let Some(normal) = &out.normal {
        io::write_normal_png(&suffixed(&a.out_prefix, "_normal.png"), normal)?;
    }
    if let Some(feature) = &out.feature {
        io::write_feature_map(&suffixed(&a.out_prefix, "_feature.ggfm"), feature)?;
    }
    println!(
        "rendered view {} ({} of {} primitives degenerate)",
        a.view, out.degenerate_count, field.len()
    );
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let data = io::load_scene::<f32>(&a.scene)?;
    let field = io::read_field::<f32>(&a.field)?;
    let decoder = io::read_decoder::<f32>(&a.decoder)?;
    let embeddings = query_embeddings(&data.embedding_entries, &a.query)?;
    let indices = match &a.views {
        Some(list) => parse_indices(list, data.views.len())?,
        None => (0..data.views.len()).collect(),
    };
    let cams: Vec<RenderCamera<f32>> =
        indices.iter().map(|&i| RenderCamera::of_view(&data.views[i])).collect();
    let cfg = RasterConfig::default();
    let loc = localize(&field, &cams, &decoder, &embeddings, a.threshold as f32, &cfg)?;
    for (k, &i) in indices.iter().enumerate() {
        let png = suffixed(&a.out_prefix, &format!("_v{i:02}_relevance.png"));
        let raw = suffixed(&a.out_prefix, &format!("_v{i:02}_relevance.ggfm"));
        io::write_relevance_png(&png, &loc.relevance[k])?;
        io::write_feature_map(&raw, &loc.relevance[k])?;
    }
    let result = io::QueryResultRecord {
        query: a.query.clone(),
        threshold: a.threshold,
        bbox_min: [loc.bbox_min[0] as f64, loc.bbox_min[1] as f64, loc.bbox_min[2] as f64],
        bbox_max: [loc.bbox_max[0] as f64, loc.bbox_max[1] as f64, loc.bbox_max[2] as f64],
        hull_vertices: loc
            .hull
            .vertices
            .iter()
            .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
            .collect(),
    };
    io::write_query_result(&suffixed(&a.out_prefix, "_result.json"), &result)?;
    println!(
        "query '{}': {} surface points, bbox [{:.3} {:.3} {:.3}] - [{:.3} {:.3} {:.3}]",
        a.query,
        loc.points.len(),
        result.bbox_min[0],
        result.bbox_min[1],
        result.bbox_min[2],
        result.bbox_max[0],
        result.bbox_max[1],
        result.bbox_max[2],
    );
    Ok(())
}

fn cmd_grasp_filter(a: GraspFilterArgs) -> Result<()> {
    let proposals = io::read_proposals::<f32>(&a.proposals)?;
    let cloud = match (&a.cloud, &a.scene, &a.field, &a.decoder, &a.query) {
        (Some(ply), None, None, None, None) => io::read_ply::<f32>(ply)?,
        (None, Some(scene), Some(field_path), Some(decoder_path), Some(query)) => {
            let data = io::load_scene::<f32>(scene)?;
            let field = io::read_field::<f32>(field_path)?;
            let decoder = io::read_decoder::<f32>(decoder_path)?;
            let embeddings = query_embeddings(&data.embedding_entries, query)?;
            let cams: Vec<RenderCamera<f32>> =
                data.views.iter().map(RenderCamera::of_view).collect();
            let cfg = RasterConfig::default();
            let loc =
                localize(&field, &cams, &decoder, &embeddings, a.threshold as f32, &cfg)?;
            build_grasp_cloud(&field, &cams, &loc, &cfg)?
        }
        _ => {
            return Err(Error::DegenerateInput(
                "provide either --cloud, or --scene --field --decoder --query".into(),
            ))
        }
    };
    if let Some(out) = &a.export_cloud {
        io::write_ply(out, &cloud)?;
    }
    let config = GraspFilterConfig {
        angle_sum_threshold: a.angle_threshold as f32,
        normal_lookup_radius: a.radius as f32,
    };
    let selection = select_grasp(&proposals, &cloud, &config)?;

    let mut feasible: Vec<usize> = (0..proposals.len())
        .filter(|&i| selection.assessments[i].feasible)
        .collect();
    feasible.sort_by(|&i, &j| {
        proposals[j].score.partial_cmp(&proposals[i].score).expect("finite scores")
    });
    let records: Vec<io::ProposalRecord> = feasible
        .iter()
        .map(|&i| {
            let mut rec = io::ProposalRecord::from_proposal(&proposals[i]);
            rec.feasible = Some(true);
            rec.angle_sum_rad =
                selection.assessments[i].angle_sum.map(|t| t as f64);
            rec
        })
        .collect();
    io::write_proposals(&a.out, &records)?;
    let best = &proposals[selection.best];
    println!(
        "kept {}/{} proposals; best: index {} score {:.4}",
        records.len(),
        proposals.len(),
        selection.best,
        best.score
    );
    Ok(())
}

fn cmd_update(a: UpdateArgs) -> Result<()> {
    let mut field = io::read_field::<f32>(&a.field)?;
    let motion = io::read_transform::<f32>(&a.transform)?;
    let sel = io::read_query_result(&a.selection)?;
    let vertices: Vec<Vec3<f32>> = sel
        .hull_vertices
        .iter()
        .map(|v| Vec3::new(v[0] as f32, v[1] as f32, v[2] as f32))
        .collect();
    let hull = convex_hull(&vertices)?;
    let moved = transform_subset(&mut field, &hull, &motion);
    println!("moved {moved} primitives");

    let mut cfg = load_train_config(&a.config, a.iterations, a.seed)?;
    cfg.fine_tune = true;
    if cfg.iterations == 0 {
        io::write_field(&a.out_field, &field)?;
        println!("wrote {} (no fine-tuning)", a.out_field.display());
        return Ok(());
    }

    let data = io::load_scene::<f32>(&a.scene)?;
    let indices = match &a.views {
        Some(list) => parse_indices(list, data.views.len())?,
        None => {
            let n = data.views.len().min(5).max(1);
            (0..n).map(|k| k * data.views.len() / n).collect()
        }
    };
    let views: Vec<CameraView<f32>> =
        indices.iter().map(|&i| data.views[i].clone()).collect();
    let instances: Vec<ggsplat_core::efd::InstanceMap> =
        indices.iter().map(|&i| data.instances[i].clone()).collect();
    let decoder = match &a.decoder {
        Some(path) => io::read_decoder::<f32>(path)?,
        None => {
            // No decoder: fine-tune geometry and color only.
            cfg.lambda_contrastive = 0.0;
            cfg.lambda_distill = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Decoder::init(field.d_latent, DECODER_HIDDEN, 1, &mut rng)
        }
    };
    let inputs = TrainInputs {
        views: &views,
        instances: &instances,
        embeddings: &data.instance_embeddings,
    };
    let result = train(field, decoder, &inputs, &cfg)?;
    io::write_field(&a.out_field, &result.field)?;
    if let (Some(out), Some(_)) = (&a.out_decoder, &a.decoder) {
        io::write_decoder(out, &result.decoder)?;
    }
    println!(
        "fine-tuned {} steps on {} views -> {}",
        cfg.steps(),
        views.len(),
        a.out_field.display()
    );
    if let Some(div) = result.diverged {
        return Err(Error::DivergenceDetected { iteration: div.iteration });
    }
    Ok(())
}

#[derive(Serialize)]
struct QueryReport {
    name: String,
    miou: f64,
    hits: usize,
    views: usize,
    latency_s: f64,
}

#[derive(Serialize)]
struct EvalReport {
    threshold: f64,
    queries: Vec<QueryReport>,
    miou: f64,
    accuracy: f64,
    latency_s: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = io::load_scene::<f32>(&a.scene)?;
    let field = io::read_field::<f32>(&a.field)?;
    let decoder = io::read_decoder::<f32>(&a.decoder)?;
    let names: Vec<String> = match &a.queries {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => data
            .embedding_entries
            .iter()
            .filter(|(n, _)| !CANONICAL_NAMES.contains(&n.as_str()))
            .map(|(n, _)| n.clone())
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::DegenerateInput("no queries to evaluate".into()));
    }
    let cams: Vec<RenderCamera<f32>> =
        data.views.iter().map(RenderCamera::of_view).collect();
    let cfg = RasterConfig::default();

    // Latency protocol: one 640x480 feature map (view 0's camera, scaled
    // intrinsics), then time each query's full relevance-map evaluation.
    let (lw, lh) = (640usize, 480usize);
    let base = &data.views[0];
    let (sx, sy) =
        (lw as f32 / base.width() as f32, lh as f32 / base.height() as f32);
    let latency_cam = RenderCamera {
        intrinsics: ggsplat_core::camera::Intrinsics {
            fx: base.intrinsics.fx * sx,
            fy: base.intrinsics.fy * sy,
            cx: base.intrinsics.cx * sx,
            cy: base.intrinsics.cy * sy,
        },
        pose: base.pose,
        width: lw,
        height: lh,
    };
    let latency_cache = raster::project(&field, &latency_cam, &cfg);
    let (latency_out, _) = raster::render_forward(
        &field,
        &latency_cam,
        ChannelSet { feature: true, ..Default::default() },
        &latency_cache,
        &cfg,
    );
    let latency_feat = latency_out.feature.expect("feature channel requested");

    let mut reports = Vec::new();
    for name in &names {
        let embeddings = query_embeddings(&data.embedding_entries, name)?;

        let t0 = Instant::now();
        let eval = RelevanceEvaluator::new(&decoder, &embeddings)?;
        let _map = eval.relevance_map(&latency_feat)?;
        let latency_s = t0.elapsed().as_secs_f64();

        let id: Option<u32> = name.strip_prefix("obj").and_then(|s| s.parse().ok());
        let id = id.ok_or_else(|| {
            Error::DegenerateInput(format!(
                "query '{name}' has no ground-truth mask (expected an obj<id> name)"
            ))
        })?;
        let (mut inter, mut union, mut hits) = (0usize, 0usize, 0usize);
        match localize(&field, &cams, &decoder, &embeddings, a.threshold as f32, &cfg) {
            Ok(loc) => {
                for (v, mask) in loc.mask2d.iter().enumerate() {
                    let gt: Vec<bool> =
                        data.instances[v].data().iter().map(|&px| px == id).collect();
                    for (m, g) in mask.iter().zip(&gt) {
                        inter += usize::from(*m && *g);
                        union += usize::from(*m || *g);
                    }
                    if localization_hit(&loc.relevance[v], &gt)? {
                        hits += 1;
                    }
                }
            }
            Err(Error::EmptyQueryResult) => {
                // Nothing passed the threshold anywhere: score zero overlap.
                for v in 0..data.views.len() {
                    union += data.instances[v].data().iter().filter(|&&px| px == id).count();
                }
            }
            Err(e) => return Err(e),
        }
        let miou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        println!(
            "query {name}: mIoU {miou:.4}, hits {hits}/{}, latency {latency_s:.3} s",
            data.views.len()
        );
        reports.push(QueryReport {
            name: name.clone(),
            miou,
            hits,
            views: data.views.len(),
            latency_s,
        });
    }
    let miou = reports.iter().map(|r| r.miou).sum::<f64>() / reports.len() as f64;
    let accuracy = reports.iter().map(|r| r.hits).sum::<usize>() as f64
        / reports.iter().map(|r| r.views).sum::<usize>() as f64;
    let latency_s =
        reports.iter().map(|r| r.latency_s).sum::<f64>() / reports.len() as f64;
    println!(
        "summary: mIoU {miou:.4}, accuracy {accuracy:.4}, latency {latency_s:.3} s/query at {lw}x{lh}"
    );
    if let Some(out) = &a.out {
        let report =
            EvalReport { threshold: a.threshold, queries: reports, miou, accuracy, latency_s };
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        std::fs::write(out, text)?;
    }
    Ok(())
}
