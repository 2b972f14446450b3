//! Command-line front end. Thin by design: parse arguments, validate inputs,
//! and dispatch into the library. Exit codes: 0 success, 2 usage or config
//! error, 3 runtime abort (non-finite loss, I/O).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use repose::checkpoint::Checkpoint;
use repose::config::{ConfigError, RunConfig};
use repose::data::{self, io as dio, region_index, ImageTensor, Keypoints, ParsingMap};
use repose::edit::{apply_style_edits, edit_region, transfer_texture, EditScript};
use repose::extractor::FeatureExtractor;
use repose::imagegen::{ImageGenerator, TableSource};
use repose::metrics::{fid, psnr, EmbeddingSet};
use repose::parsing::ParsingGenerator;
use repose::rng::Rng;
use repose::style::StyleCodeTable;
use repose::train::{self, load_params, prepare_samples, TrainError};

#[derive(Parser)]
#[command(name = "repose", version, about = "Two-stage person image synthesis and editing")]
struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set optim.lr_g=1e-3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Convenience override for run.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, workdir: &Path) -> Result<RunConfig, AppError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("run.seed={seed}"));
        }
        let path = self.config.as_ref().map(|p| resolve(workdir, p));
        Ok(RunConfig::load(path.as_deref(), &overrides)?)
    }
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Source RGB image (PNG).
    #[arg(long)]
    source_image: PathBuf,
    /// Source keypoints (JSON, 18 entries).
    #[arg(long)]
    source_keypoints: PathBuf,
    /// Source parsing map (grayscale PNG, labels 0..7).
    #[arg(long)]
    source_parsing: PathBuf,
}

#[derive(Args, Clone)]
struct CheckpointArgs {
    /// Stage-1 checkpoint.
    #[arg(long)]
    parsing_ckpt: PathBuf,
    /// Stage-2 checkpoint.
    #[arg(long)]
    image_ckpt: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic paired dataset.
    MakeFixtures {
        /// Number of pairs.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Square resolution of the fixtures.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train one phase on a fixture dataset.
    Train {
        /// parsing | image | joint
        #[arg(long)]
        phase: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-pose a person: stage 1 then stage 2.
    TransferPose {
        #[command(flatten)]
        ckpts: CheckpointArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Target keypoints (JSON).
        #[arg(long)]
        target_keypoints: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        /// Where to write the generated parsing map.
        #[arg(long)]
        out_parsing: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pose transfer with style rows copied from a reference image.
    TransferTexture {
        #[command(flatten)]
        ckpts: CheckpointArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        target_keypoints: PathBuf,
        #[arg(long)]
        reference_image: PathBuf,
        #[arg(long)]
        reference_parsing: PathBuf,
        /// Comma-separated region names (empty = plain pose transfer).
        #[arg(long, default_value = "")]
        regions: String,
        #[arg(long)]
        out_image: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep a region's style between two reference images.
    Interpolate {
        #[command(flatten)]
        ckpts: CheckpointArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        target_keypoints: PathBuf,
        #[arg(long)]
        ref_a_image: PathBuf,
        #[arg(long)]
        ref_a_parsing: PathBuf,
        #[arg(long)]
        ref_b_image: PathBuf,
        #[arg(long)]
        ref_b_parsing: PathBuf,
        #[arg(long)]
        region: String,
        /// Comma-separated blend positions in [0, 1].
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        alphas: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Apply an edit script (parsing repaints and style edits), then render.
    EditRegion {
        #[command(flatten)]
        ckpts: CheckpointArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Target keypoints; defaults to the source keypoints.
        #[arg(long)]
        target_keypoints: Option<PathBuf>,
        /// TOML edit script.
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_parsing: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// PSNR + FID report over aligned generated/truth directories.
    Eval {
        #[arg(long)]
        generated_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

enum AppError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<data::DataError> for AppError {
    fn from(e: data::DataError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<repose::checkpoint::CheckpointError> for AppError {
    fn from(e: repose::checkpoint::CheckpointError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<repose::edit::EditError> for AppError {
    fn from(e: repose::edit::EditError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<repose::ModelError> for AppError {
    fn from(e: repose::ModelError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let wd = &cli.workdir;
    match cli.command {
        Command::MakeFixtures { n, seed, out_dir, resolution } => {
            if resolution < 32 || resolution % 16 != 0 {
                return Err(AppError::Usage(format!(
                    "--resolution must be >= 32 and a multiple of 16, got {resolution}"
                )));
            }
            cmd_make_fixtures(n, seed, &resolve(wd, &out_dir), resolution)
        }
        Command::Train { phase, config } => cmd_train(&phase, &config, wd),
        Command::TransferPose { ckpts, source, target_keypoints, out_image, out_parsing, config } => {
            let cfg = config.load(wd)?;
            let models = Models::load(&cfg, wd, &ckpts)?;
            let inputs = SourceInputs::load(wd, &source)?;
            let target_kps = load_kps(wd, &target_keypoints, &inputs.image)?;
            let (generated, gen_map) = models.pose_transfer(&inputs, &target_kps, TableChoice::Plain)?;
            write_image(wd, &out_image, &generated)?;
            if let Some(p) = out_parsing {
                dio::save_parsing_png(&resolve(wd, &p), &gen_map)?;
            }
            Ok(())
        }
        Command::TransferTexture {
            ckpts,
            source,
            target_keypoints,
            reference_image,
            reference_parsing,
            regions,
            out_image,
            config,
        } => {
            let cfg = config.load(wd)?;
            let regions = parse_regions(&regions)?;
            let models = Models::load(&cfg, wd, &ckpts)?;
            let inputs = SourceInputs::load(wd, &source)?;
            let target_kps = load_kps(wd, &target_keypoints, &inputs.image)?;
            let reference = load_reference(wd, &reference_image, &reference_parsing)?;
            let ref_table = models.image.encode_style_table(&reference.0, &data::one_hot(&reference.1));
            let (generated, _) =
                models.pose_transfer(&inputs, &target_kps, TableChoice::Texture { ref_table, regions })?;
            write_image(wd, &out_image, &generated)?;
            Ok(())
        }
        Command::Interpolate {
            ckpts,
            source,
            target_keypoints,
            ref_a_image,
            ref_a_parsing,
            ref_b_image,
            ref_b_parsing,
            region,
            alphas,
            out_dir,
            config,
        } => {
            let cfg = config.load(wd)?;
            let region_idx = region_index(&region).ok_or_else(|| {
                AppError::Usage(format!(
                    "unknown region {region:?} (expected one of {})",
                    data::REGION_NAMES.join(", ")
                ))
            })? as usize;
            let alpha_tokens = parse_alphas(&alphas)?;
            let models = Models::load(&cfg, wd, &ckpts)?;
            let inputs = SourceInputs::load(wd, &source)?;
            let target_kps = load_kps(wd, &target_keypoints, &inputs.image)?;
            let ra = load_reference(wd, &ref_a_image, &ref_a_parsing)?;
            let rb = load_reference(wd, &ref_b_image, &ref_b_parsing)?;
            let table_a = models.image.encode_style_table(&ra.0, &data::one_hot(&ra.1));
            let table_b = models.image.encode_style_table(&rb.0, &data::one_hot(&rb.1));
            let dir = resolve(wd, &out_dir);
            std::fs::create_dir_all(&dir)
                .map_err(|e| AppError::Runtime(format!("creating {}: {e}", dir.display())))?;
            for (token, alpha) in &alpha_tokens {
                let blended = repose::edit::interpolate_texture(&table_a, &table_b, region_idx, *alpha)?;
                let (generated, _) = models.pose_transfer(
                    &inputs,
                    &target_kps,
                    TableChoice::Texture {
                        ref_table: blended,
                        regions: BTreeSet::from([region_idx]),
                    },
                )?;
                let out = dir.join(format!("interp_{token}.png"));
                dio::save_image_png(&out, &generated)?;
                println!("{}", out.display());
            }
            Ok(())
        }
        Command::EditRegion {
            ckpts,
            source,
            target_keypoints,
            script,
            out_image,
            out_parsing,
            config,
        } => {
            let cfg = config.load(wd)?;
            let script = EditScript::load(&resolve(wd, &script))?;
            let models = Models::load(&cfg, wd, &ckpts)?;
            let inputs = SourceInputs::load(wd, &source)?;
            let target_kps = match target_keypoints {
                Some(p) => load_kps(wd, &p, &inputs.image)?,
                None => inputs.keypoints.clone(),
            };
            let (generated, edited_map) =
                models.pose_transfer(&inputs, &target_kps, TableChoice::Script(script))?;
            write_image(wd, &out_image, &generated)?;
            if let Some(p) = out_parsing {
                dio::save_parsing_png(&resolve(wd, &p), &edited_map)?;
            }
            Ok(())
        }
        Command::Eval { generated_dir, truth_dir, out, config } => {
            let cfg = config.load(wd)?;
            cmd_eval(&cfg, wd, &resolve(wd, &generated_dir), &resolve(wd, &truth_dir), out.as_deref())
        }
    }
}

fn cmd_make_fixtures(n: usize, seed: u64, out_dir: &Path, resolution: usize) -> Result<(), AppError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let mut pair_lines = String::new();
    for i in 0..n {
        let pair = data::make_synthetic_pair(seed.wrapping_add(i as u64), resolution, resolution);
        let (a, b) = dio::save_pair(out_dir, &format!("s{i:03}"), &pair)?;
        pair_lines.push_str(&format!("{a}\t{b}\n"));
    }
    let list = out_dir.join("pairs.txt");
    std::fs::write(&list, pair_lines)
        .map_err(|e| AppError::Runtime(format!("writing {}: {e}", list.display())))?;
    println!("wrote {n} pairs to {}", out_dir.display());
    Ok(())
}

fn cmd_train(phase: &str, config: &ConfigArgs, workdir: &Path) -> Result<(), AppError> {
    let cfg = config.load(workdir)?;
    // validate the dataset location before any model work
    let root = resolve(workdir, &cfg.data.root);
    if !root.is_dir() {
        return Err(AppError::Usage(format!(
            "data.root {} does not exist (run make-fixtures first)",
            root.display()
        )));
    }
    let list = root.join(&cfg.data.pairs);
    if !list.is_file() {
        return Err(AppError::Usage(format!("data.pairs {} does not exist", list.display())));
    }
    let fx = cfg.extractor.build(workdir)?;
    let pairs = dio::load_pair_list(&list)?
        .into_iter()
        .map(|(a, b)| dio::load_pair(&root, &a, &b))
        .collect::<Result<Vec<_>, _>>()?;
    if pairs.is_empty() {
        return Err(AppError::Usage(format!("pair list {} is empty", list.display())));
    }
    let with_caches = phase != "parsing";
    let data = prepare_samples(pairs, &fx, cfg.model.sigma(), with_caches);
    let out_dir = workdir.join(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| AppError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("resolved.toml"), cfg.resolved_toml())
        .map_err(|e| AppError::Runtime(format!("writing resolved config: {e}")))?;
    let outcome = match phase {
        "parsing" => train::train_parsing(&cfg, workdir, &data)?,
        "image" => train::train_image(&cfg, workdir, &fx, &data)?,
        "joint" => train::train_joint(&cfg, workdir, &fx, &data)?,
        other => {
            return Err(AppError::Usage(format!(
                "unknown phase {other:?} (expected parsing, image, or joint)"
            )))
        }
    };
    println!(
        "phase {phase} finished: final loss {:.6}, checkpoint {}",
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

struct SourceInputs {
    image: ImageTensor,
    keypoints: Keypoints,
    parsing: ParsingMap,
}

impl SourceInputs {
    fn load(wd: &Path, args: &SourceArgs) -> Result<SourceInputs, AppError> {
        let (image, keypoints, parsing) = dio::load_sample(
            &resolve(wd, &args.source_image),
            &resolve(wd, &args.source_keypoints),
            &resolve(wd, &args.source_parsing),
        )?;
        Ok(SourceInputs { image, keypoints, parsing })
    }
}

fn load_kps(wd: &Path, path: &Path, image: &ImageTensor) -> Result<Keypoints, AppError> {
    Ok(dio::load_keypoints_json(&resolve(wd, path), image.width(), image.height())?)
}

fn load_reference(wd: &Path, image: &Path, parsing: &Path) -> Result<(ImageTensor, ParsingMap), AppError> {
    let img = dio::load_image_png(&resolve(wd, image))?;
    let par = dio::load_parsing_png(&resolve(wd, parsing))?;
    if (par.width(), par.height()) != (img.width(), img.height()) {
        return Err(AppError::Runtime(format!(
            "reference parsing {}x{} does not match image {}x{}",
            par.width(),
            par.height(),
            img.width(),
            img.height()
        )));
    }
    Ok((img, par))
}

fn write_image(wd: &Path, path: &Path, img: &ImageTensor) -> Result<(), AppError> {
    let p = resolve(wd, path);
    if let Some(parent) = p.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| AppError::Runtime(format!("creating {}: {e}", parent.display())))?;
        }
    }
    dio::save_image_png(&p, img)?;
    println!("{}", p.display());
    Ok(())
}

fn parse_regions(spec: &str) -> Result<BTreeSet<usize>, AppError> {
    let mut out = BTreeSet::new();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let idx = region_index(token).ok_or_else(|| {
            AppError::Usage(format!(
                "unknown region {token:?} (expected one of {})",
                data::REGION_NAMES.join(", ")
            ))
        })?;
        out.insert(idx as usize);
    }
    Ok(out)
}

fn parse_alphas(spec: &str) -> Result<Vec<(String, f64)>, AppError> {
    let mut out = Vec::new();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let v: f64 = token
            .parse()
            .map_err(|_| AppError::Usage(format!("bad alpha {token:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(AppError::Usage(format!("alpha {v} outside [0, 1]")));
        }
        out.push((token.replace('.', "_"), v));
    }
    if out.is_empty() {
        return Err(AppError::Usage("--alphas must list at least one value".into()));
    }
    Ok(out)
}

/// How the style table is assembled for a generation call.
enum TableChoice {
    Plain,
    Texture { ref_table: StyleCodeTable, regions: BTreeSet<usize> },
    Script(EditScript),
}

struct Models {
    fx: FeatureExtractor,
    parsing: ParsingGenerator,
    image: ImageGenerator,
    sigma256: f64,
}

impl Models {
    fn load(cfg: &RunConfig, wd: &Path, ckpts: &CheckpointArgs) -> Result<Models, AppError> {
        let fx = cfg.extractor.build(wd)?;
        let mut rng = Rng::from_seed(0);
        let mut parsing = ParsingGenerator::new(&cfg.model.parsing, &mut rng);
        let mut image = ImageGenerator::new(&cfg.model.image, cfg.model.ablation, &mut rng);
        let pc = Checkpoint::load(&resolve(wd, &ckpts.parsing_ckpt))?;
        load_params(&mut parsing, &pc, "")?;
        let ic = Checkpoint::load(&resolve(wd, &ckpts.image_ckpt))?;
        load_params(&mut image, &ic, "")?;
        Ok(Models { fx, parsing, image, sigma256: cfg.model.sigma256 })
    }

    /// Stage 1 then stage 2 with an optionally edited table/parsing.
    fn pose_transfer(
        &self,
        src: &SourceInputs,
        target_kps: &Keypoints,
        choice: TableChoice,
    ) -> Result<(ImageTensor, ParsingMap), AppError> {
        let (h, w) = (src.image.height(), src.image.width());
        let sigma = self.sigma256 * h.min(w) as f64 / 256.0;
        let heat_src = data::encode_pose_heatmap(&src.keypoints, h, w, sigma);
        let heat_tgt = data::encode_pose_heatmap(target_kps, h, w, sigma);
        let src_onehot = data::one_hot(&src.parsing);
        let gen_map = self.parsing.generate_map(&heat_src, &heat_tgt, &src_onehot)?;
        let (gen_map, table_choice) = match choice {
            TableChoice::Script(script) => {
                let edited = edit_region(&gen_map, &script)?;
                let base = self.image.encode_style_table(&src.image, &src_onehot);
                let table = apply_style_edits(&base, &script)?;
                (edited, Some(table))
            }
            TableChoice::Texture { ref_table, regions } => {
                let base = self.image.encode_style_table(&src.image, &src_onehot);
                let table = transfer_texture(&base, &ref_table, &regions)?;
                (gen_map, Some(table))
            }
            TableChoice::Plain => (gen_map, None),
        };
        let gen_onehot = data::one_hot(&gen_map);
        let source = match &table_choice {
            Some(t) => TableSource::Override(t),
            None => TableSource::Pool,
        };
        let (img, _) = self.image.generate(
            &self.fx,
            &src.image,
            &src_onehot,
            &gen_onehot,
            &heat_tgt,
            source,
        )?;
        Ok((img, gen_map))
    }
}

fn cmd_eval(
    cfg: &RunConfig,
    _wd: &Path,
    generated_dir: &Path,
    truth_dir: &Path,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let fx = cfg.extractor.build(_wd)?;
    let mut stems: Vec<String> = std::fs::read_dir(generated_dir)
        .map_err(|e| AppError::Runtime(format!("reading {}: {e}", generated_dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".png")?;
            if stem.ends_with("_parsing") {
                None
            } else {
                Some(stem.to_string())
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(AppError::Runtime(format!("no PNG images in {}", generated_dir.display())));
    }
    let mut psnr_sum = 0.0;
    let mut gen_emb = Vec::new();
    let mut truth_emb = Vec::new();
    for stem in &stems {
        let gen_path = generated_dir.join(format!("{stem}.png"));
        let truth_path = truth_dir.join(format!("{stem}.png"));
        if !truth_path.is_file() {
            return Err(AppError::Runtime(format!(
                "missing counterpart {} for generated {stem}.png",
                truth_path.display()
            )));
        }
        let gen = dio::load_image_png(&gen_path)?;
        let truth = dio::load_image_png(&truth_path)?;
        let v = psnr(&gen, &truth).map_err(|e| AppError::Runtime(e.to_string()))?;
        psnr_sum += v;
        gen_emb.push(fx.embed(gen.tensor()));
        truth_emb.push(fx.embed(truth.tensor()));
    }
    let fid_value = fid(
        &EmbeddingSet::new(truth_emb).map_err(|e| AppError::Runtime(e.to_string()))?,
        &EmbeddingSet::new(gen_emb).map_err(|e| AppError::Runtime(e.to_string()))?,
    )
    .map_err(|e| AppError::Runtime(e.to_string()))?;
    let report = serde_json::json!({
        "psnr_mean": psnr_sum / stems.len() as f64,
        "fid": fid_value,
        "n_pairs": stems.len(),
        "embedder_id": fx.id(),
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(p) => std::fs::write(p, &text)
            .map_err(|e| AppError::Runtime(format!("writing {}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}
