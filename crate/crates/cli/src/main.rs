use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use poseforge::annotation::{AnnotationFile, ImagePoses, PoseFile, PosePerson};
use poseforge::codec::{self, EncodeConfig, GroundTruthMaps, MapMeta, DEFAULT_SIGMA, DEFAULT_TAU};
use poseforge::cost::{describe_layer_cost, network_cost, CostOptions};
use poseforge::decode::{decode_poses, DecodeConfig, PersonInstance, DEFAULT_THRESHOLD};
use poseforge::graph::Init;
use poseforge::hourglass::{Arch, Network, NetworkPlan, OUTPUT_STRIDE};
use poseforge::metrics::{evaluate, Metric};
use poseforge::synth::{generate_scene, SceneConfig};
use poseforge::{dshg, selftest, Shape, Tensor, TreeVariant};

#[derive(Parser)]
#[command(
    name = "poseforge",
    version,
    about = "Stacked hourglass pose estimation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tree {
    Flat,
    Hier,
}

impl From<Tree> for TreeVariant {
    fn from(t: Tree) -> Self {
        match t {
            Tree::Flat => TreeVariant::Flat,
            Tree::Hier => TreeVariant::Hierarchical,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and FLOP counts for a network or a single layer.
    Count {
        #[arg(long, default_value = "ds")]
        arch: Arch,
        #[arg(long, default_value_t = 8)]
        stages: usize,
        #[arg(long, default_value_t = 256)]
        input: usize,
        /// Emit CSV instead of a table.
        #[arg(long)]
        csv: bool,
        /// Leave activations, normalization and pooling out of the FLOP total.
        #[arg(long)]
        macs_only: bool,
        /// Cost a single layer description instead, e.g. `dsconv:128:128:3`.
        #[arg(long)]
        layer: Option<String>,
        /// Input `C,H,W` for `--layer`.
        #[arg(long, default_value = "128,64,64")]
        shape: String,
    },
    /// Generate synthetic annotations.
    Synth {
        #[arg(long, default_value_t = 3)]
        persons: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images; image `i` uses seed `seed + i`.
        #[arg(long, default_value_t = 1)]
        images: u64,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 256)]
        height: u32,
        /// Minimum centroid distance in pixels.
        #[arg(long, default_value_t = 64.0)]
        min_separation: f64,
        #[arg(long, default_value_t = 10.0)]
        max_rotation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render ground-truth heatmaps and offsets for an annotation file.
    Encode {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, value_enum, default_value = "flat")]
        tree: Tree,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group map peaks into persons.
    Decode {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        thresh: f32,
        #[arg(long, value_enum, default_value = "flat")]
        tree: Tree,
        #[arg(long)]
        refine_peaks: bool,
        /// Start new persons for joints with no free slot.
        #[arg(long)]
        spawn: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a network forward pass and write its last-stage maps.
    Infer {
        /// PNG/JPEG image, or a DSHG file holding one (1,3,H,W) tensor.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "ds")]
        arch: Arch,
        #[arg(long, default_value_t = 8)]
        stages: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Weights container; random weights from `--seed` when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "pckh@0.5")]
        metric: Metric,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selftest {
        #[arg(long, default_value_t = 10)]
        trials: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("POSEFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .with_context(|| format!("POSEFORGE_THREADS={v} is not a count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Count {
            arch,
            stages,
            input,
            csv,
            macs_only,
            layer,
            shape,
        } => {
            let opts = CostOptions {
                include_elementwise: !macs_only,
            };
            if let Some(desc) = layer {
                let dims: Vec<usize> = shape
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("bad --shape `{shape}`"))?;
                let [c, h, w] = dims[..] else {
                    bail!("--shape needs C,H,W")
                };
                let cost = describe_layer_cost(&desc, c, h, w)?;
                println!("{desc}: params {} flops {}", cost.params, cost.flops(opts));
                return Ok(ExitCode::SUCCESS);
            }
            let report = network_cost(&NetworkPlan::new(arch, stages, input), opts)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                println!("{report}");
            }
        }
        Command::Synth {
            persons,
            seed,
            images,
            width,
            height,
            min_separation,
            max_rotation,
            out,
        } => {
            let scenes = (0..images)
                .map(|i| {
                    generate_scene(&SceneConfig {
                        persons,
                        width,
                        height,
                        min_separation,
                        max_rotation_deg: max_rotation,
                        seed: seed + i,
                        ..Default::default()
                    })
                })
                .collect::<poseforge::Result<Vec<_>>>()?;
            AnnotationFile { images: scenes }.write(&out)?;
        }
        Command::Encode {
            ann,
            sigma,
            tau,
            tree,
            out,
        } => {
            let file =
                AnnotationFile::read(&ann).with_context(|| format!("reading {}", ann.display()))?;
            let cfg = EncodeConfig {
                sigma,
                tau,
                stride: OUTPUT_STRIDE,
                tree: tree.into(),
            };
            let maps = file
                .images
                .par_iter()
                .map(|img| Ok((img.id.clone(), codec::encode(img, &cfg)?)))
                .collect::<poseforge::Result<Vec<_>>>()?;
            codec::write_maps(&out, &maps)?;
        }
        Command::Decode {
            maps,
            thresh,
            tree,
            refine_peaks,
            spawn,
            out,
        } => {
            let maps =
                codec::read_maps(&maps).with_context(|| format!("reading {}", maps.display()))?;
            let cfg = DecodeConfig {
                threshold: thresh,
                tree: tree.into(),
                refine_peaks,
                spawn_unassigned: spawn,
                ..Default::default()
            };
            let images = maps
                .par_iter()
                .map(|(id, m)| decode_image(id, m, &cfg))
                .collect::<poseforge::Result<Vec<_>>>()?;
            PoseFile { images }.write(&out)?;
        }
        Command::Infer {
            input,
            arch,
            stages,
            size,
            weights,
            seed,
            out,
        } => {
            let plan = NetworkPlan::new(arch, stages, size);
            let net = match weights {
                Some(p) => {
                    Network::load(plan, &p).with_context(|| format!("loading {}", p.display()))?
                }
                None => Network::build(plan, Init::Uniform { seed })?,
            };
            let image = load_input(&input, size)?;
            let outputs = net.forward(&image)?;
            let last = outputs.last().context("network has no stages")?;
            let grid = codec::Grid::new(last.heatmaps.shape().w, last.heatmaps.shape().h);
            let id = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let maps = GroundTruthMaps {
                heatmaps: last.heatmaps.clone(),
                offsets: last.offsets.clone(),
                meta: MapMeta {
                    sigma: DEFAULT_SIGMA,
                    tau: DEFAULT_TAU,
                    z: grid.z(),
                    stride: OUTPUT_STRIDE,
                    width: size as u32,
                    height: size as u32,
                },
            };
            codec::write_maps(&out, &[(id, maps)])?;
        }
        Command::Eval {
            pred,
            gt,
            metric,
            csv,
        } => {
            let p = PoseFile::read(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let g =
                AnnotationFile::read(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let report = evaluate(&p, &g, metric);
            println!("{report}");
            if let Some(path) = csv {
                fs::write(&path, report.to_csv())?;
            }
        }
        Command::Selftest { trials } => {
            let checks = selftest::run(trials)?;
            let mut ok = true;
            for c in &checks {
                println!("{c}");
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn decode_image(
    id: &str,
    m: &GroundTruthMaps,
    cfg: &DecodeConfig,
) -> poseforge::Result<ImagePoses> {
    let persons = decode_poses(&m.heatmaps, &m.offsets, cfg)?;
    Ok(ImagePoses {
        id: id.to_string(),
        persons: persons.iter().map(to_pose_person).collect(),
    })
}

fn to_pose_person(p: &PersonInstance) -> PosePerson {
    PosePerson {
        score: f64::from(p.score()),
        centroid: [p.centroid.x, p.centroid.y],
        joints: p
            .joints
            .iter()
            .map(|j| j.map(|c| [c.x, c.y, f64::from(c.score)]))
            .collect(),
    }
}

/// Loads an image as a `(1, 3, size, size)` tensor in `[0, 1]`. Images are
/// resized to the network input, so decoded coordinates refer to that frame.
fn load_input(path: &Path, size: usize) -> Result<Tensor> {
    let is_dshg = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("dshg"));
    if is_dshg {
        let mut tensors = dshg::read_file(path)?;
        if tensors.len() != 1 {
            bail!(
                "{} holds {} tensors, expected 1",
                path.display(),
                tensors.len()
            );
        }
        let (_, t) = tensors.remove(0);
        let s = t.shape();
        if s != Shape::new(1, 3, size, size) {
            bail!("input tensor has shape {s}, expected (1, 3, {size}, {size})");
        }
        return Ok(t);
    }
    let img = image::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rgb = img
        .resize_exact(
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        )
        .to_rgb8();
    let t = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    Ok(t)
}
