//! Command-line surface for the private photo retrieval protocol: key and
//! detector generation, the cloud server, the vendor and user drivers, and
//! a scripted end-to-end demo with built-in oracle verification.

mod demo;

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use facecloak::aspe::{DetectorKey, MatchingKey};
use facecloak::cascade::{
    default_stage_shape, encrypt_detector, synth_cascade, CascadeModel, EncryptedDetector,
};
use facecloak::image::{load_pnm, ScanParams, DEFAULT_SCALE_FACTOR, DEFAULT_STRIDE, DEFAULT_WINDOW_EDGE};
use facecloak::protocol::{
    serve_listener, user_detect, user_query, CloudServer, PhotoUpload, RequestClient,
    StreamTransport, DEFAULT_DETECT_BATCH,
};
use facecloak::retrieval::{IdentityRegistry, CONTENT_KEY_LEN};

#[derive(Parser)]
#[command(
    name = "facecloak",
    about = "Privacy-preserving face retrieval over an untrusted cloud",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key file: a vector-encryption key, or a 32-byte photo
    /// content key with --content.
    Keygen(KeygenArgs),
    /// Generate a synthetic cascade detector model.
    GenDetector(GenDetectorArgs),
    /// Encrypt a detector model under a product key.
    EncryptDetector(EncryptDetectorArgs),
    /// Register an encrypted detector with a running server (vendor role).
    Publish(PublishArgs),
    /// Run the cloud server.
    Serve(ServeArgs),
    /// Detect faces in an image via the server (user role).
    Detect(DetectArgs),
    /// Build an encrypted photo index from a manifest and optionally upload
    /// it (user role, off-line phase).
    Index(IndexArgs),
    /// Retrieve photos containing all target members (user role, on-line
    /// phase).
    Query(QueryArgs),
    /// Scripted end-to-end run against an in-process server, verified
    /// against plaintext oracles.
    Demo(demo::DemoArgs),
}

#[derive(Args)]
struct KeygenArgs {
    /// Vector length (window length for detector keys, member count for
    /// matching keys).
    #[arg(long, required_unless_present = "content", conflicts_with = "content")]
    dim: Option<u32>,
    /// Generate a symmetric photo content key instead.
    #[arg(long)]
    content: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output key file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDetectorArgs {
    /// Comma-separated weak-classifier counts per stage.
    #[arg(long, default_value_t = default_shape_string())]
    stages: String,
    #[arg(long, default_value_t = DEFAULT_WINDOW_EDGE as u16)]
    window_edge: u16,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncryptDetectorArgs {
    /// Product key file.
    #[arg(long)]
    key: PathBuf,
    /// Plaintext model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PublishArgs {
    #[arg(long)]
    connect: String,
    /// Encrypted detector file.
    #[arg(long)]
    detector: PathBuf,
    #[arg(long, default_value = "default")]
    detector_id: String,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address; port 0 picks an ephemeral port (printed on stdout).
    #[arg(long, default_value = "127.0.0.1:7450")]
    listen: String,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    connect: String,
    /// Product key file.
    #[arg(long)]
    key: PathBuf,
    /// Binary PGM (P5) or PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW_EDGE)]
    window_edge: u32,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: u32,
    #[arg(long, default_value_t = DEFAULT_SCALE_FACTOR)]
    scale_factor: f64,
    /// Smallest pyramid level edge; defaults to the window edge.
    #[arg(long)]
    min_edge: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_DETECT_BATCH)]
    batch_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Emit one JSON object per result line.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IndexArgs {
    /// Matching key file.
    #[arg(long)]
    key: PathBuf,
    /// 32-byte content key file.
    #[arg(long)]
    content_key: PathBuf,
    /// Comma-separated member identifiers, order defines label coordinates.
    #[arg(long)]
    registry: String,
    /// Manifest: one photo per line, `id<TAB>path<TAB>member,member` (the
    /// member list may be empty).
    #[arg(long)]
    photos: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the encrypted index to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also upload the records to a running server.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    connect: String,
    /// Matching key file.
    #[arg(long)]
    key: PathBuf,
    /// 32-byte content key file.
    #[arg(long)]
    content_key: PathBuf,
    /// Comma-separated member identifiers, order defines label coordinates.
    #[arg(long)]
    registry: String,
    /// Comma-separated target members; photos containing all of them match.
    #[arg(long)]
    targets: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Write decrypted photos into this directory as `<photo_id>.bin`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

pub(crate) fn default_shape_string() -> String {
    default_stage_shape()
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn seeded_rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_os_rng(),
    }
}

pub(crate) fn parse_stages(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad stage size {s:?}"))
        })
        .collect()
}

fn parse_members(spec: &str) -> Vec<String> {
    spec.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn load_content_key(path: &PathBuf) -> Result<[u8; CONTENT_KEY_LEN]> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    bytes
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("content key must be exactly {CONTENT_KEY_LEN} bytes"))
}

fn connect_client(addr: &str) -> Result<RequestClient<StreamTransport<TcpStream>>> {
    let stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    Ok(RequestClient::new(StreamTransport::new(stream)))
}

/// Exit code contract: 0 success, 1 usage or local input error, 2 protocol
/// or verification failure.
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<facecloak::Error>().is_some_and(|fe| {
                matches!(
                    fe,
                    facecloak::Error::Remote { .. } | facecloak::Error::Protocol(_)
                )
            }) || e.is::<demo::VerificationFailure>()
            {
                2
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen(args) => keygen(args),
        Command::GenDetector(args) => gen_detector(args),
        Command::EncryptDetector(args) => encrypt_detector_cmd(args),
        Command::Publish(args) => publish(args),
        Command::Serve(args) => serve(args),
        Command::Detect(args) => detect(args),
        Command::Index(args) => index(args),
        Command::Query(args) => query(args),
        Command::Demo(args) => demo::run(args),
    }
}

fn keygen(args: KeygenArgs) -> Result<()> {
    let mut rng = seeded_rng(args.seed);
    if args.content {
        let mut key = [0u8; CONTENT_KEY_LEN];
        rng.fill(&mut key);
        std::fs::write(&args.out, key)?;
        println!("wrote {CONTENT_KEY_LEN}-byte content key to {}", args.out.display());
        return Ok(());
    }
    let dim = args.dim.expect("clap enforces --dim without --content") as usize;
    if dim == 0 {
        bail!("--dim must be at least 1");
    }
    // Detector and matching keys share one file format; the purpose is
    // fixed by whichever side loads it.
    let key = DetectorKey::generate(dim, &mut rng);
    key.save(&args.out)?;
    println!("wrote dim-{dim} key to {}", args.out.display());
    Ok(())
}

fn gen_detector(args: GenDetectorArgs) -> Result<()> {
    let stages = parse_stages(&args.stages)?;
    let mut rng = seeded_rng(args.seed);
    let model = synth_cascade(&stages, args.window_edge, &mut rng)?;
    model.save(&args.out)?;
    println!(
        "wrote {}-stage model ({} weak classifiers, window edge {}) to {}",
        model.stages().len(),
        model.total_weak_classifiers(),
        model.window_edge(),
        args.out.display()
    );
    Ok(())
}

fn encrypt_detector_cmd(args: EncryptDetectorArgs) -> Result<()> {
    let key = DetectorKey::load(&args.key)
        .with_context(|| format!("loading key {}", args.key.display()))?;
    let model = CascadeModel::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let mut rng = seeded_rng(args.seed);
    let enc = encrypt_detector(&key, &model, &mut rng)?;
    enc.save(&args.out)?;
    println!(
        "wrote encrypted detector ({} ciphertext pairs) to {}",
        enc.total_weak_classifiers(),
        args.out.display()
    );
    Ok(())
}

fn publish(args: PublishArgs) -> Result<()> {
    let detector = EncryptedDetector::load(&args.detector)
        .with_context(|| format!("loading detector {}", args.detector.display()))?;
    let mut client = connect_client(&args.connect)?;
    // Already encrypted: register directly rather than via vendor_publish.
    let reply = client.request(|request_id| facecloak::protocol::ProtocolMessage::RegisterDetector {
        request_id,
        detector_id: args.detector_id.clone(),
        detector,
    })?;
    match reply {
        facecloak::protocol::ProtocolMessage::Ack { .. } => {
            println!("registered detector {:?}", args.detector_id);
            Ok(())
        }
        other => bail!("unexpected reply {}", other.kind()),
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    let server = Arc::new(CloudServer::new());
    serve_listener(server, listener)?;
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let key = DetectorKey::load(&args.key)
        .with_context(|| format!("loading key {}", args.key.display()))?;
    let bytes =
        std::fs::read(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let image = load_pnm(&bytes)?;
    let params = ScanParams {
        window_edge: args.window_edge,
        stride: args.stride,
        scale_factor: args.scale_factor,
        min_edge: args.min_edge,
    };
    let mut rng = seeded_rng(args.seed);
    let mut client = connect_client(&args.connect)?;
    let accepted = user_detect(&mut client, &image, &key, &params, args.batch_size, &mut rng)?;
    if args.json {
        for g in &accepted {
            println!(
                "{}",
                serde_json::json!({
                    "event": "detection",
                    "origin_x": g.origin_x,
                    "origin_y": g.origin_y,
                    "scale": g.scale,
                    "edge": (args.window_edge as f64 * g.scale).round() as u32,
                })
            );
        }
        println!(
            "{}",
            serde_json::json!({ "event": "summary", "accepted": accepted.len() })
        );
    } else {
        for g in &accepted {
            println!(
                "face window at ({}, {}) scale {:.3}",
                g.origin_x, g.origin_y, g.scale
            );
        }
        println!("{} window(s) accepted", accepted.len());
    }
    Ok(())
}

fn index(args: IndexArgs) -> Result<()> {
    if args.out.is_none() && args.connect.is_none() {
        bail!("index needs --out, --connect, or both");
    }
    let key = MatchingKey::load(&args.key)
        .with_context(|| format!("loading key {}", args.key.display()))?;
    let content_key = load_content_key(&args.content_key)?;
    let registry = IdentityRegistry::new(parse_members(&args.registry))?;
    if key.dim() != registry.len() {
        bail!(
            "matching key dim {} does not cover {} registry members",
            key.dim(),
            registry.len()
        );
    }

    let manifest = std::fs::read_to_string(&args.photos)
        .with_context(|| format!("reading {}", args.photos.display()))?;
    let mut uploads = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (id, path, members) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(path), members) => (id, path, members.unwrap_or("")),
            _ => bail!("manifest line {}: expected id<TAB>path<TAB>members", lineno + 1),
        };
        let bytes =
            std::fs::read(path).with_context(|| format!("manifest line {}: {path}", lineno + 1))?;
        uploads.push(PhotoUpload {
            photo_id: id.to_string(),
            bytes,
            members: parse_members(members),
        });
    }

    let mut rng = seeded_rng(args.seed);
    // Build the records once; the same encryption serves the local index
    // file and the upload.
    let mut store = facecloak::retrieval::PhotoStore::new();
    let mut records = Vec::new();
    for u in &uploads {
        let label = facecloak::retrieval::build_label_vector(&registry, &u.members)?;
        let mut nonce = [0u8; facecloak::retrieval::NONCE_LEN];
        rng.fill(&mut nonce);
        records.push(facecloak::retrieval::PhotoRecord {
            photo_id: u.photo_id.clone(),
            nonce,
            ciphertext: facecloak::retrieval::encrypt_photo(&content_key, &nonce, &u.bytes),
            enc_label: facecloak::retrieval::encrypt_label(&key, &label, &mut rng)?,
        });
    }
    store.insert_all(records.clone())?;

    if let Some(out) = &args.out {
        store.save(out)?;
        emit(
            args.json,
            serde_json::json!({ "event": "index-written", "photos": store.len(), "path": out.display().to_string() }),
            format!("wrote {}-record index to {}", store.len(), out.display()),
        );
    }
    if let Some(addr) = &args.connect {
        let mut client = connect_client(addr)?;
        let reply = client.request(|request_id| facecloak::protocol::ProtocolMessage::UploadPhotos {
            request_id,
            records,
        })?;
        match reply {
            facecloak::protocol::ProtocolMessage::Ack { .. } => emit(
                args.json,
                serde_json::json!({ "event": "uploaded", "photos": store.len() }),
                format!("uploaded {} photos to {addr}", store.len()),
            ),
            other => bail!("unexpected reply {}", other.kind()),
        }
    }
    Ok(())
}

fn query(args: QueryArgs) -> Result<()> {
    let key = MatchingKey::load(&args.key)
        .with_context(|| format!("loading key {}", args.key.display()))?;
    let content_key = load_content_key(&args.content_key)?;
    let registry = IdentityRegistry::new(parse_members(&args.registry))?;
    let targets = parse_members(&args.targets);
    let target_refs: Vec<&str> = targets.iter().map(|s| s.as_str()).collect();

    let mut rng = seeded_rng(args.seed);
    let mut client = connect_client(&args.connect)?;
    let photos = user_query(
        &mut client,
        &key,
        &content_key,
        &registry,
        &target_refs,
        &mut rng,
    )?;

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        for (id, bytes) in &photos {
            std::fs::write(dir.join(format!("{id}.bin")), bytes)?;
        }
    }
    if args.json {
        for (id, bytes) in &photos {
            println!(
                "{}",
                serde_json::json!({ "event": "match", "photo_id": id, "bytes": bytes.len() })
            );
        }
        println!(
            "{}",
            serde_json::json!({ "event": "summary", "matched": photos.len() })
        );
    } else {
        for (id, bytes) in &photos {
            println!("matched {id} ({} bytes)", bytes.len());
        }
        println!("{} photo(s) matched", photos.len());
    }
    Ok(())
}

fn emit(json: bool, value: serde_json::Value, text: String) {
    if json {
        println!("{value}");
    } else {
        println!("{text}");
    }
}
