//! Scripted end-to-end scenario against an in-process server: the vendor
//! publishes an encrypted detector, a user runs detection, uploads an
//! encrypted photo collection, and retrieves by member query. Every secure
//! result is checked against a plaintext oracle computed locally; any
//! mismatch fails the run with exit code 2.

use std::fmt;
use std::sync::Arc;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use facecloak::aspe::{DetectorKey, MatchingKey};
use facecloak::cascade::{eval_cascade_plain, synth_cascade};
use facecloak::image::{scan_windows, GrayImage, ScanParams};
use facecloak::protocol::{
    user_detect, user_query, user_upload, vendor_publish, ChannelTransport, CloudServer,
    PhotoUpload, RequestClient, WindowGeometry,
};
use facecloak::retrieval::{IdentityRegistry, CONTENT_KEY_LEN};

use crate::{default_shape_string, parse_stages};

/// A secure result disagreed with its plaintext oracle.
#[derive(Debug)]
pub struct VerificationFailure(pub String);

impl fmt::Display for VerificationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailure {}

#[derive(Args)]
pub struct DemoArgs {
    /// Master seed; the entire run, including stdout, is a pure function of
    /// it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    members: usize,
    #[arg(long, default_value_t = 1000)]
    photos: usize,
    /// Comma-separated weak-classifier counts per stage.
    #[arg(long, default_value_t = default_shape_string())]
    stages: String,
    #[arg(long, default_value_t = 24)]
    window_edge: u16,
    /// Emit one JSON object per result line.
    #[arg(long)]
    json: bool,
}

pub fn run(args: DemoArgs) -> Result<()> {
    if args.members == 0 || args.photos == 0 {
        anyhow::bail!("--members and --photos must be positive");
    }
    let stages = parse_stages(&args.stages)?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut out = Reporter { json: args.json };

    // The cloud: an in-process server on the other end of a frame channel.
    let server = Arc::new(CloudServer::new());
    let (client_end, mut server_end) = ChannelTransport::pair();
    let server_ref = Arc::clone(&server);
    let server_thread = std::thread::spawn(move || server_ref.serve_connection(&mut server_end));
    let mut client = RequestClient::new(client_end);

    // Vendor: product key and detector, registered with the cloud. The key
    // reaches the user out of band; here both roles live in this process.
    let dim = (args.window_edge as usize).pow(2);
    let product_key = DetectorKey::generate(dim, &mut rng);
    let model = synth_cascade(&stages, args.window_edge, &mut rng)?;
    vendor_publish(&mut client, "demo-detector", &product_key, &model, &mut rng)?;
    out.event(
        "publish",
        serde_json::json!({
            "stages": model.stages().len(),
            "weak_classifiers": model.total_weak_classifiers(),
            "window_edge": args.window_edge,
        }),
        format!(
            "vendor: registered a {}-stage detector ({} weak classifiers, window edge {})",
            model.stages().len(),
            model.total_weak_classifiers(),
            args.window_edge
        ),
    );

    // User, detection phase on a synthetic photo, checked against the local
    // plaintext cascade.
    let photo_edge = (args.window_edge as u32) * 2;
    let photo = GrayImage::random(photo_edge, photo_edge, &mut rng);
    let params = ScanParams {
        window_edge: args.window_edge as u32,
        stride: 4,
        scale_factor: 1.25,
        min_edge: None,
    };
    let windows = scan_windows(&photo, &params);
    let accepted = user_detect(&mut client, &photo, &product_key, &params, 256, &mut rng)?;
    let predicted: Vec<WindowGeometry> = windows
        .iter()
        .filter(|w| eval_cascade_plain(&model, &w.vector).unwrap().accepted)
        .map(|w| WindowGeometry {
            origin_x: w.origin_x,
            origin_y: w.origin_y,
            scale: w.scale,
        })
        .collect();
    out.event(
        "detect",
        serde_json::json!({
            "photo": format!("{photo_edge}x{photo_edge}"),
            "windows": windows.len(),
            "accepted": accepted.len(),
        }),
        format!(
            "user: detection over a synthetic {photo_edge}x{photo_edge} photo: {} windows, {} accepted",
            windows.len(),
            accepted.len()
        ),
    );
    let detect_ok = accepted == predicted;
    out.verdict("detect oracle", detect_ok, "secure decisions equal the local plaintext cascade");

    // User, off-line phase: members, labels, encrypted upload.
    let registry = IdentityRegistry::new(
        (1..=args.members).map(|i| format!("member-{i}")).collect(),
    )?;
    let matching_key = MatchingKey::generate(registry.len(), &mut rng);
    let mut content_key = [0u8; CONTENT_KEY_LEN];
    rng.fill(&mut content_key);

    let mut uploads = Vec::with_capacity(args.photos);
    for i in 0..args.photos {
        let members: Vec<String> = registry
            .members()
            .iter()
            .filter(|_| rng.random::<f64>() < 0.35)
            .cloned()
            .collect();
        let mut bytes = format!("synthetic photo {i}|").into_bytes();
        bytes.extend((0..24).map(|_| rng.random::<u8>()));
        uploads.push(PhotoUpload {
            photo_id: format!("photo-{i:04}"),
            bytes,
            members,
        });
    }
    user_upload(
        &mut client,
        &matching_key,
        &content_key,
        &registry,
        &uploads,
        &mut rng,
    )?;
    out.event(
        "upload",
        serde_json::json!({ "photos": uploads.len(), "members": registry.len() }),
        format!(
            "user: uploaded {} encrypted photos with encrypted labels over {} members",
            uploads.len(),
            registry.len()
        ),
    );

    // User, on-line phase: query for photos containing every target.
    let target_count = 2.min(registry.len());
    let mut target_idx: Vec<usize> = (0..registry.len()).collect();
    for i in 0..target_count {
        let j = rng.random_range(i..target_idx.len());
        target_idx.swap(i, j);
    }
    let targets: Vec<&str> = target_idx[..target_count]
        .iter()
        .map(|&i| registry.members()[i].as_str())
        .collect();
    out.event(
        "query",
        serde_json::json!({ "targets": targets, "lambda": targets.len() }),
        format!("user: querying for {{{}}} (lambda {})", targets.join(", "), targets.len()),
    );
    let retrieved = user_query(
        &mut client,
        &matching_key,
        &content_key,
        &registry,
        &targets,
        &mut rng,
    )?;

    // Brute-force oracle over the plaintext member sets.
    let expected: Vec<&PhotoUpload> = uploads
        .iter()
        .filter(|u| targets.iter().all(|t| u.members.iter().any(|m| m == t)))
        .collect();
    let ids_match = retrieved.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>()
        == expected.iter().map(|u| u.photo_id.as_str()).collect::<Vec<_>>();
    let bytes_match = retrieved
        .iter()
        .zip(&expected)
        .all(|((_, got), want)| *got == want.bytes);

    out.event(
        "retrieve",
        serde_json::json!({ "matched": retrieved.len() }),
        format!("user: retrieved and decrypted {} photos", retrieved.len()),
    );
    let match_ok = ids_match && bytes_match;
    out.verdict(
        "oracle match",
        match_ok,
        "retrieved set equals the brute-force prediction and decrypts intact",
    );

    let matched_ids: Vec<&str> = retrieved.iter().map(|(id, _)| id.as_str()).collect();
    out.event(
        "result",
        serde_json::json!({ "matched_ids": matched_ids }),
        format!("matched photo ids: {}", matched_ids.join(" ")),
    );

    drop(client);
    server_thread
        .join()
        .expect("server thread panicked")
        .expect("server loop failed");

    if !detect_ok {
        return Err(VerificationFailure("secure detection diverged from the plaintext cascade".into()).into());
    }
    if !match_ok {
        return Err(VerificationFailure("retrieval diverged from the brute-force oracle".into()).into());
    }
    Ok(())
}

struct Reporter {
    json: bool,
}

impl Reporter {
    fn event(&mut self, kind: &str, mut json: serde_json::Value, text: String) {
        if self.json {
            json.as_object_mut()
                .unwrap()
                .insert("event".into(), serde_json::json!(kind));
            println!("{json}");
        } else {
            println!("{text}");
        }
    }

    fn verdict(&mut self, name: &str, ok: bool, detail: &str) {
        let status = if ok { "OK" } else { "FAIL" };
        if self.json {
            println!(
                "{}",
                serde_json::json!({ "event": "verdict", "check": name, "status": status })
            );
        } else {
            println!("{name}: {status} ({detail})");
        }
    }
}
