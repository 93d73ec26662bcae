//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). Every tolerance and
//! scale is pinned here.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use facecloak::aspe::{
    secure_inner, DetectorKey, EncDataVector, EncQueryVector, MatchingKey,
};
use facecloak::cascade::{
    default_stage_shape, encrypt_detector, eval_cascade_plain, eval_cascade_secure, synth_cascade,
    CascadeModel, DetectionOutcome, EncryptedDetector,
};
use facecloak::image::{normalize_window, scan_windows, GrayImage, ScanParams};
use facecloak::protocol::{
    decode, encode, user_detect, user_query, user_upload, vendor_publish, ChannelTransport,
    CloudServer, FrameTransport, MatchedPhoto, PhotoUpload, ProtocolMessage, RequestClient,
    StreamTransport, WindowGeometry,
};
use facecloak::retrieval::{
    build_label_vector, build_query, encrypt_label, encrypt_query_label, match_photos,
    IdentityRegistry, LabelVector, PhotoRecord, PhotoStore, CONTENT_KEY_LEN, MATCH_TOLERANCE,
    NONCE_LEN,
};
use facecloak::ErrorCode;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_vec(n: usize, r: &mut ChaCha20Rng) -> Vec<f64> {
    (0..n).map(|_| gaussian(r)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conclude(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn f64_bytes(vs: &[f64]) -> Vec<u8> {
    vs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// 1. Inner products survive encryption at the working dimensions:
///    1000 random pairs per dimension, error within 1e-8·(1+|dot|), under
///    10 seconds.
#[test]
fn inner_product_preservation() {
    let started = Instant::now();
    let mut r = rng(0xA001);
    let mut worst = 0.0f64;
    for dim in [5usize, 64, 576] {
        let key = DetectorKey::generate(dim, &mut r);
        for _ in 0..1000 {
            let y = random_vec(dim, &mut r);
            let w = random_vec(dim, &mut r);
            let expected = dot(&y, &w);
            let got = secure_inner(
                &key.encrypt_data(&y, &mut r).unwrap(),
                &key.encrypt_query(&w, &mut r).unwrap(),
            )
            .unwrap();
            let rel = (got - expected).abs() / (1.0 + expected.abs());
            worst = worst.max(rel);
        }
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-8 && elapsed < Duration::from_secs(10);
    conclude(
        "inner-product preservation",
        pass,
        &format!("worst relative error {worst:.3e} over 3000 pairs in {elapsed:.2?} (budget 10s)"),
    );
}

/// Rational-arithmetic re-statement of the two split rules, written against
/// the rules themselves rather than the implementation.
mod rational_oracle {
    use super::*;

    pub fn random_rational(r: &mut ChaCha20Rng) -> BigRational {
        let num = BigInt::from(r.random_range(-50i64..=50));
        let den = BigInt::from(r.random_range(1i64..=20));
        BigRational::new(num, den)
    }

    fn half() -> BigRational {
        BigRational::new(BigInt::from(1), BigInt::from(2))
    }

    pub fn split_data_exact(
        v: &[BigRational],
        split: &[bool],
        r: &mut ChaCha20Rng,
    ) -> (Vec<BigRational>, Vec<BigRational>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, &bit) in v.iter().zip(split) {
            if bit {
                a.push(x.clone());
                b.push(x.clone());
            } else {
                let blind = random_rational(r);
                a.push(x * half() - &blind);
                b.push(x * half() + &blind);
            }
        }
        (a, b)
    }

    pub fn split_query_exact(
        v: &[BigRational],
        split: &[bool],
        r: &mut ChaCha20Rng,
    ) -> (Vec<BigRational>, Vec<BigRational>) {
        let flipped: Vec<bool> = split.iter().map(|b| !b).collect();
        split_data_exact(v, &flipped, r)
    }

    pub fn dot_exact(a: &[BigRational], b: &[BigRational]) -> BigRational {
        a.iter()
            .zip(b)
            .map(|(x, y)| x * y)
            .fold(BigRational::from(BigInt::from(0)), |acc, t| acc + t)
    }
}

/// 2. The paired split rules preserve dot products *exactly* in rational
///    arithmetic: 500 random cases at dimensions up to 8.
#[test]
fn exact_split_identity() {
    use rational_oracle::*;
    let mut r = rng(0xA002);
    for case in 0..500 {
        let dim = r.random_range(1usize..=8);
        let split: Vec<bool> = (0..dim).map(|_| r.random()).collect();
        let y: Vec<BigRational> = (0..dim).map(|_| random_rational(&mut r)).collect();
        let w: Vec<BigRational> = (0..dim).map(|_| random_rational(&mut r)).collect();
        let (y1, y2) = split_data_exact(&y, &split, &mut r);
        let (w1, w2) = split_query_exact(&w, &split, &mut r);
        let lhs = dot_exact(&y1, &w1) + dot_exact(&y2, &w2);
        let rhs = dot_exact(&y, &w);
        assert_eq!(lhs, rhs, "case {case}: exact identity violated");
    }
    conclude(
        "exact split identity",
        true,
        "y′·w′ + y″·w″ = y·w exactly for 500 random rational cases at dims ≤ 8",
    );
}

/// Evaluates every stage without short-circuiting; also reports the
/// smallest |t_i − θ_i| margin seen across the whole cascade.
fn full_sweep(model: &CascadeModel, x: &[f64]) -> (bool, Option<usize>, Vec<f64>, f64) {
    let mut scores = Vec::with_capacity(model.stages().len());
    let mut rejected = None;
    let mut min_margin = f64::INFINITY;
    for (i, stage) in model.stages().iter().enumerate() {
        let mut score = 0.0;
        for c in &stage.weak_classifiers {
            let t = dot(x, &c.hyperplane);
            min_margin = min_margin.min((t - c.theta).abs());
            score += if t >= c.theta { c.alpha } else { c.beta };
        }
        scores.push(score);
        if score < 0.0 && rejected.is_none() {
            rejected = Some(i);
        }
    }
    (rejected.is_none(), rejected, scores, min_margin)
}

/// 3. Encrypted detection decides exactly like the plaintext cascade on a
///    full-scale detector (22 stages, 3..213 classifiers, 2135 total) over
///    10,000 random normalized windows at L = 576, excluding windows with
///    any weak-classifier margin below 1e-6. Budget: 120 s single-threaded.
#[test]
fn secure_detection_equivalence() {
    let started = Instant::now();
    let mut r = rng(0xA003);

    let shape = default_stage_shape();
    assert_eq!(shape.len(), 22);
    assert_eq!(shape[0], 3);
    assert_eq!(*shape.iter().max().unwrap(), 213);
    assert_eq!(shape.iter().sum::<usize>(), 2135);

    let model = synth_cascade(&shape, 24, &mut r).unwrap();
    let key = DetectorKey::generate(576, &mut r);
    let enc = encrypt_detector(&key, &model, &mut r).unwrap();
    assert_eq!(enc.total_weak_classifiers(), 2135);
    assert_eq!(enc.stages().len(), 22);

    let windows = 10_000;
    let mut excluded = 0usize;
    let mut accepted = 0usize;
    for _ in 0..windows {
        let raw = random_vec(576, &mut r);
        let x = normalize_window(&raw);
        let (oracle_accepted, oracle_rejected, oracle_scores, min_margin) = full_sweep(&model, &x);
        if min_margin < 1e-6 {
            excluded += 1;
            continue;
        }
        let plain = eval_cascade_plain(&model, &x).unwrap();
        let secure = eval_cascade_secure(&enc, &key.encrypt_query(&x, &mut r).unwrap()).unwrap();

        assert_eq!(plain.accepted, oracle_accepted);
        assert_eq!(secure.accepted, oracle_accepted, "decision disagreement");
        assert_eq!(secure.rejected_at_stage, oracle_rejected);
        let evaluated = oracle_rejected.map_or(oracle_scores.len(), |i| i + 1);
        assert_eq!(secure.stage_scores.len(), evaluated);
        for (s, o) in secure.stage_scores.iter().zip(&oracle_scores) {
            assert!(
                (s - o).abs() <= 1e-8 * (1.0 + o.abs()),
                "stage score drift: secure {s}, oracle {o}"
            );
        }
        accepted += oracle_accepted as usize;
    }
    let elapsed = started.elapsed();
    let pass = elapsed < Duration::from_secs(120);
    conclude(
        "secure detection equivalence",
        pass,
        &format!(
            "{} windows agreed 100% ({accepted} accepted), {excluded} margin exclusions, in {elapsed:.2?} (budget 120s)",
            windows - excluded
        ),
    );
}

/// 4. Retrieval at working scale: t = 5, 1000 random labels, 100 random
///    non-empty queries. Matches equal the brute-force subset oracle as
///    sets (and in store order); every ret is within 1e-3 of an integer.
///    Budget: 5 s.
#[test]
fn retrieval_correctness() {
    let started = Instant::now();
    let mut r = rng(0xA004);
    let t = 5;
    let key = MatchingKey::generate(t, &mut r);

    let labels: Vec<Vec<bool>> = (0..1000)
        .map(|_| (0..t).map(|_| r.random()).collect())
        .collect();
    let mut store = PhotoStore::new();
    for (i, bits) in labels.iter().enumerate() {
        let mut nonce = [0u8; NONCE_LEN];
        r.fill(&mut nonce);
        store
            .insert(PhotoRecord {
                photo_id: format!("photo-{i:04}"),
                nonce,
                ciphertext: Vec::new(),
                enc_label: encrypt_label(&key, &LabelVector::new(bits.clone()), &mut r).unwrap(),
            })
            .unwrap();
    }

    let mut max_integrality = 0.0f64;
    let mut queries_run = 0;
    while queries_run < 100 {
        let qbits: Vec<bool> = (0..t).map(|_| r.random()).collect();
        let lambda = qbits.iter().filter(|&&b| b).count();
        if lambda == 0 {
            continue;
        }
        queries_run += 1;
        let qvec: Vec<f64> = qbits.iter().map(|&b| b as u8 as f64).collect();
        let eq = key.encrypt_query(&qvec, &mut r).unwrap();

        let got = match_photos(&store, &eq, lambda, MATCH_TOLERANCE).unwrap();
        let expected: Vec<String> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| qbits.iter().zip(l.iter()).all(|(&qb, &lb)| !qb || lb))
            .map(|(i, _)| format!("photo-{i:04}"))
            .collect();
        assert_eq!(got, expected, "match set diverged from subset oracle");

        for record in store.records() {
            let ret = secure_inner(&record.enc_label, &eq).unwrap();
            max_integrality = max_integrality.max((ret - ret.round()).abs());
        }
    }
    let elapsed = started.elapsed();
    let pass = max_integrality <= 1e-3 && elapsed < Duration::from_secs(5);
    conclude(
        "retrieval correctness",
        pass,
        &format!(
            "100 queries over 1000 labels matched the oracle exactly; worst ret integrality gap {max_integrality:.3e}; {elapsed:.2?} (budget 5s)"
        ),
    );
}

/// Everything one scripted run of the whole system produces, for comparing
/// across transports.
struct FlowOutcome {
    accepted_windows: Vec<WindowGeometry>,
    locally_predicted_windows: Vec<WindowGeometry>,
    retrieved: Vec<(String, Vec<u8>)>,
    oracle_ids: Vec<String>,
    oracle_bytes: Vec<Vec<u8>>,
    pinned_match_frame: Vec<u8>,
}

/// Scripted end-to-end scenario: publish, detect, upload, query, decrypt.
/// Every random draw comes from `seed`, so two runs differing only in
/// transport produce identical bytes everywhere.
fn run_flow<T: FrameTransport>(seed: u64, transport: T) -> FlowOutcome {
    let mut r = rng(seed);
    let mut client = RequestClient::new(transport);

    // Vendor: product key + detector, registered with the cloud. A small
    // shape keeps the scripted run quick; the full shape is exercised in
    // `secure_detection_equivalence`.
    let window_edge = 8u16;
    let dim = (window_edge as usize).pow(2);
    let product_key = DetectorKey::generate(dim, &mut r);
    let model = synth_cascade(&[3, 5, 8], window_edge, &mut r).unwrap();
    vendor_publish(&mut client, "detector-1", &product_key, &model, &mut r).unwrap();

    // User, detection phase on a synthetic photo.
    let photo = GrayImage::random(40, 32, &mut r);
    let params = ScanParams {
        window_edge: window_edge as u32,
        stride: 4,
        scale_factor: 1.25,
        min_edge: None,
    };
    let accepted_windows =
        user_detect(&mut client, &photo, &product_key, &params, 64, &mut r).unwrap();
    let locally_predicted_windows: Vec<WindowGeometry> = scan_windows(&photo, &params)
        .into_iter()
        .filter(|w| eval_cascade_plain(&model, &w.vector).unwrap().accepted)
        .map(|w| WindowGeometry {
            origin_x: w.origin_x,
            origin_y: w.origin_y,
            scale: w.scale,
        })
        .collect();

    // User, off-line phase: registry, labels, photo upload.
    let registry = IdentityRegistry::new(
        ["alice", "bob", "carol", "dan", "erin"]
            .map(String::from)
            .to_vec(),
    )
    .unwrap();
    let matching_key = MatchingKey::generate(registry.len(), &mut r);
    let mut content_key = [0u8; CONTENT_KEY_LEN];
    r.fill(&mut content_key);

    let mut uploads = Vec::new();
    for i in 0..120 {
        let members: Vec<String> = registry
            .members()
            .iter()
            .filter(|_| r.random::<f64>() < 0.35)
            .cloned()
            .collect();
        let mut bytes = format!("photo contents #{i}: ").into_bytes();
        bytes.extend((0..16).map(|_| r.random::<u8>()));
        uploads.push(PhotoUpload {
            photo_id: format!("p{i:03}"),
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
        &mut r,
    )
    .unwrap();

    // User, on-line phase.
    let targets = ["alice", "dan"];
    let retrieved = user_query(
        &mut client,
        &matching_key,
        &content_key,
        &registry,
        &targets,
        &mut r,
    )
    .unwrap();

    let oracle: Vec<&PhotoUpload> = uploads
        .iter()
        .filter(|u| targets.iter().all(|t| u.members.iter().any(|m| m == t)))
        .collect();
    let oracle_ids = oracle.iter().map(|u| u.photo_id.clone()).collect();
    let oracle_bytes = oracle.iter().map(|u| u.bytes.clone()).collect();

    // One more match request with a pinned id, captured raw for the
    // byte-equality comparison across transports.
    let query = build_query(&registry, &targets).unwrap();
    let eq = encrypt_query_label(&matching_key, &query, &mut r).unwrap();
    let mut transport = client.into_transport();
    let frame = encode(&ProtocolMessage::MatchRequest {
        request_id: 0xF1A7,
        query: eq,
        lambda: query.lambda() as u32,
    });
    transport.send(&frame).unwrap();
    let pinned_match_frame = transport.recv().unwrap().expect("reply frame");

    FlowOutcome {
        accepted_windows,
        locally_predicted_windows,
        retrieved,
        oracle_ids,
        oracle_bytes,
        pinned_match_frame,
    }
}

/// 5. The full scripted scenario over the in-process transport and the TCP
///    transport: the user decrypts exactly the oracle-predicted photos, the
///    detect results equal the local plaintext cascade, and the final match
///    reply is byte-identical across transports.
#[test]
fn end_to_end_flow_across_transports() {
    let seed = 0xA005;

    // In-process run.
    let channel_outcome = {
        let server = std::sync::Arc::new(CloudServer::new());
        let (client_end, mut server_end) = ChannelTransport::pair();
        let server_ref = std::sync::Arc::clone(&server);
        let handle = std::thread::spawn(move || {
            server_ref.serve_connection(&mut server_end).unwrap();
        });
        let outcome = run_flow(seed, client_end);
        handle.join().unwrap();
        outcome
    };

    // Socket run, same seed, fresh server.
    let tcp_outcome = {
        let server = std::sync::Arc::new(CloudServer::new());
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server_ref = std::sync::Arc::clone(&server);
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = StreamTransport::new(stream);
            server_ref.serve_connection(&mut t).unwrap();
        });
        let stream = std::net::TcpStream::connect(addr).unwrap();
        let outcome = run_flow(seed, StreamTransport::new(stream));
        handle.join().unwrap();
        outcome
    };

    for outcome in [&channel_outcome, &tcp_outcome] {
        assert_eq!(
            outcome.accepted_windows, outcome.locally_predicted_windows,
            "server detection diverged from the local plaintext cascade"
        );
        let got_ids: Vec<String> = outcome.retrieved.iter().map(|(id, _)| id.clone()).collect();
        assert_eq!(got_ids, outcome.oracle_ids, "retrieved set diverged from oracle");
        let got_bytes: Vec<Vec<u8>> = outcome.retrieved.iter().map(|(_, b)| b.clone()).collect();
        assert_eq!(got_bytes, outcome.oracle_bytes, "decrypted bytes corrupted");
        assert!(!outcome.retrieved.is_empty(), "scenario matched nothing; weak test");
    }

    let pass = channel_outcome.pinned_match_frame == tcp_outcome.pinned_match_frame;
    conclude(
        "end-to-end flow",
        pass,
        &format!(
            "retrieved {} photos matching oracle on both transports; match reply frames byte-identical ({} bytes); {} windows accepted",
            channel_outcome.retrieved.len(),
            channel_outcome.pinned_match_frame.len(),
            channel_outcome.accepted_windows.len(),
        ),
    );
}

mod arbitrary_messages {
    use super::*;

    pub fn geometry(r: &mut ChaCha20Rng) -> WindowGeometry {
        WindowGeometry {
            origin_x: r.random(),
            origin_y: r.random(),
            scale: r.random_range(0.25..8.0),
        }
    }

    pub fn enc_query(r: &mut ChaCha20Rng) -> EncQueryVector {
        let dim = r.random_range(1usize..6);
        let key = DetectorKey::generate(dim, r);
        let v = random_vec(dim, r);
        key.encrypt_query(&v, r).unwrap()
    }

    pub fn enc_data(r: &mut ChaCha20Rng) -> EncDataVector {
        let dim = r.random_range(1usize..6);
        let key = MatchingKey::generate(dim, r);
        let v = random_vec(dim, r);
        key.encrypt_data(&v, r).unwrap()
    }

    pub fn detector(r: &mut ChaCha20Rng) -> EncryptedDetector {
        let edge = r.random_range(1u16..4);
        let stages: Vec<usize> = (0..r.random_range(1usize..4))
            .map(|_| r.random_range(1usize..4))
            .collect();
        let model = synth_cascade(&stages, edge, r).unwrap();
        let key = DetectorKey::generate((edge as usize).pow(2), r);
        encrypt_detector(&key, &model, r).unwrap()
    }

    pub fn outcome(r: &mut ChaCha20Rng) -> DetectionOutcome {
        let rejected = r.random::<bool>();
        let n = r.random_range(1usize..5);
        DetectionOutcome {
            accepted: !rejected,
            rejected_at_stage: rejected.then(|| r.random_range(0usize..n)),
            stage_scores: random_vec(n, r),
        }
    }

    pub fn record(r: &mut ChaCha20Rng) -> PhotoRecord {
        let mut nonce = [0u8; NONCE_LEN];
        r.fill(&mut nonce);
        PhotoRecord {
            photo_id: format!("id-{}", r.random::<u32>()),
            nonce,
            ciphertext: (0..r.random_range(0usize..40)).map(|_| r.random()).collect(),
            enc_label: enc_data(r),
        }
    }

    pub fn message(variant: usize, r: &mut ChaCha20Rng) -> ProtocolMessage {
        let request_id = r.random();
        match variant {
            0 => ProtocolMessage::RegisterDetector {
                request_id,
                detector_id: format!("d{}", r.random::<u16>()),
                detector: detector(r),
            },
            1 => ProtocolMessage::DetectRequest {
                request_id,
                windows: (0..r.random_range(0usize..4))
                    .map(|_| (geometry(r), enc_query(r)))
                    .collect(),
            },
            2 => ProtocolMessage::DetectResponse {
                request_id,
                outcomes: (0..r.random_range(0usize..4))
                    .map(|_| (geometry(r), outcome(r)))
                    .collect(),
            },
            3 => ProtocolMessage::UploadPhotos {
                request_id,
                records: (0..r.random_range(0usize..4)).map(|_| record(r)).collect(),
            },
            4 => ProtocolMessage::MatchRequest {
                request_id,
                query: enc_query(r),
                lambda: r.random_range(1..6),
            },
            5 => ProtocolMessage::MatchResponse {
                request_id,
                photos: (0..r.random_range(0usize..4))
                    .map(|_| {
                        let rec = record(r);
                        MatchedPhoto {
                            photo_id: rec.photo_id,
                            nonce: rec.nonce,
                            ciphertext: rec.ciphertext,
                        }
                    })
                    .collect(),
            },
            6 => ProtocolMessage::ErrorReply {
                request_id,
                code: ErrorCode::from_u16(r.random_range(1..=10)).unwrap(),
                message: format!("m{}", r.random::<u32>()),
            },
            _ => ProtocolMessage::Ack { request_id },
        }
    }
}

/// 6. The wire layer neither panics on hostile frames (1000 fuzz cases,
///    half random bytes, half mutations of valid frames) nor loses
///    information on valid ones (200 random round trips per variant).
#[test]
fn wire_robustness() {
    let mut r = rng(0xA006);

    let mut decoded_ok = 0usize;
    for i in 0..1000 {
        let frame: Vec<u8> = if i % 2 == 0 {
            let len = r.random_range(0usize..200);
            (0..len).map(|_| r.random()).collect()
        } else {
            let mut f = encode(&arbitrary_messages::message(i % 8, &mut r));
            // A few byte-level mutations: flips, truncation, length tampering.
            match i % 6 {
                1 => {
                    let at = r.random_range(0..f.len());
                    f[at] ^= 1 << r.random_range(0..8);
                }
                3 => {
                    let keep = r.random_range(0..f.len());
                    f.truncate(keep);
                }
                _ => {
                    let bogus: u32 = r.random();
                    f[..4].copy_from_slice(&bogus.to_le_bytes());
                }
            }
            f
        };
        if decode(&frame).is_ok() {
            decoded_ok += 1;
        }
    }

    let mut round_trips = 0usize;
    for variant in 0..8 {
        for _ in 0..200 {
            let msg = arbitrary_messages::message(variant, &mut r);
            let back = decode(&encode(&msg)).expect("valid frame must decode");
            assert_eq!(back, msg);
            round_trips += 1;
        }
    }
    conclude(
        "wire robustness",
        true,
        &format!(
            "1000 fuzzed frames decoded without panic ({decoded_ok} happened to parse); {round_trips} round trips identical"
        ),
    );
}

/// 7. The serialized server state after a full run never contains the
///    planted plaintexts: a window vector, a label bit pattern, a key
///    matrix row, or a photo byte string.
#[test]
fn server_knowledge_canaries() {
    let mut r = rng(0xA007);
    let server = CloudServer::new();

    let window_edge = 8u16;
    let dim = (window_edge as usize).pow(2);
    let product_key = DetectorKey::generate(dim, &mut r);
    let model = synth_cascade(&[3, 4], window_edge, &mut r).unwrap();

    // Canary 1: a key matrix row, sliced out of the serialized key. The key
    // file layout is header (4 magic + 2 version + 4 dim + split bytes)
    // followed by mat1 row-major, so the first dim f64s are row 0.
    let key_bytes = product_key.to_bytes();
    let header = 10 + dim.div_ceil(8);
    let key_row_canary = key_bytes[header..header + 8 * dim].to_vec();

    let server_handle = |msg: ProtocolMessage| server.handle_message(msg);

    // Vendor registers the encrypted detector.
    let enc = encrypt_detector(&product_key, &model, &mut r).unwrap();
    server_handle(ProtocolMessage::RegisterDetector {
        request_id: 1,
        detector_id: "d".into(),
        detector: enc,
    });

    // Canary 2: the exact normalized window vector the user submits.
    let photo = GrayImage::random(24, 24, &mut r);
    let windows = scan_windows(
        &photo,
        &ScanParams {
            window_edge: window_edge as u32,
            stride: 8,
            scale_factor: 1.25,
            min_edge: None,
        },
    );
    let window_canary = f64_bytes(&windows[0].vector);
    let enc_windows: Vec<(WindowGeometry, EncQueryVector)> = windows
        .iter()
        .map(|w| {
            (
                WindowGeometry {
                    origin_x: w.origin_x,
                    origin_y: w.origin_y,
                    scale: w.scale,
                },
                product_key.encrypt_query(&w.vector, &mut r).unwrap(),
            )
        })
        .collect();
    server_handle(ProtocolMessage::DetectRequest {
        request_id: 2,
        windows: enc_windows,
    });

    // Canary 3 and 4: a label bit pattern (as the 0/1 doubles that get
    // encrypted) and a distinctive photo byte string.
    let registry =
        IdentityRegistry::new(["a", "b", "c", "d", "e"].map(String::from).to_vec()).unwrap();
    let matching_key = MatchingKey::generate(registry.len(), &mut r);
    let label = build_label_vector(&registry, &["a", "c", "d"]).unwrap();
    let label_canary = f64_bytes(&label.as_f64_vec());
    let photo_canary = b"CANARY-PHOTO-7f3a9c-DO-NOT-STORE-PLAINTEXT".to_vec();

    let mut content_key = [0u8; CONTENT_KEY_LEN];
    r.fill(&mut content_key);
    let mut nonce = [0u8; NONCE_LEN];
    r.fill(&mut nonce);
    server_handle(ProtocolMessage::UploadPhotos {
        request_id: 3,
        records: vec![PhotoRecord {
            photo_id: "canary-photo".into(),
            nonce,
            ciphertext: facecloak::retrieval::encrypt_photo(&content_key, &nonce, &photo_canary),
            enc_label: encrypt_label(&matching_key, &label, &mut r).unwrap(),
        }],
    });

    let query = build_query(&registry, &["a", "c"]).unwrap();
    server_handle(ProtocolMessage::MatchRequest {
        request_id: 4,
        query: encrypt_query_label(&matching_key, &query, &mut r).unwrap(),
        lambda: query.lambda() as u32,
    });

    let snapshot = server.snapshot_bytes();
    assert!(!snapshot.is_empty());

    // Positive control: the scanner finds a marker deliberately appended.
    let mut salted = snapshot.clone();
    salted.extend_from_slice(&photo_canary);
    assert!(contains(&salted, &photo_canary));

    let hyperplane_canary = f64_bytes(&model.stages()[0].weak_classifiers[0].hyperplane);
    let checks: [(&str, &[u8]); 5] = [
        ("window vector", &window_canary),
        ("label pattern", &label_canary),
        ("key matrix row", &key_row_canary),
        ("photo bytes", &photo_canary),
        ("hyperplane", &hyperplane_canary),
    ];
    for (name, needle) in checks {
        assert!(
            !contains(&snapshot, needle),
            "{name} canary leaked into the server state"
        );
        // Shorter prefixes would catch partial copies too.
        let prefix = &needle[..needle.len().min(24)];
        assert!(
            !contains(&snapshot, prefix),
            "{name} canary prefix leaked into the server state"
        );
    }
    conclude(
        "server knowledge",
        true,
        &format!(
            "no planted plaintext (5 canaries) in the {}-byte server snapshot after a full run",
            snapshot.len()
        ),
    );
}

/// 8. Encrypting the same vector 100 times under a mixed-split key yields
///    100 distinct ciphertexts on both the data and the query side.
#[test]
fn ciphertext_freshness() {
    let mut r = rng(0xA008);
    let key = DetectorKey::generate(32, &mut r);
    assert!(
        key.split().iter().any(|&b| b) && key.split().iter().any(|&b| !b),
        "seed produced a degenerate split; pick another"
    );
    let v = random_vec(32, &mut r);

    let mut data_seen = HashSet::new();
    let mut query_seen = HashSet::new();
    for _ in 0..100 {
        let ed = key.encrypt_data(&v, &mut r).unwrap();
        assert!(data_seen.insert(ed.to_bytes()));
        let eq = key.encrypt_query(&v, &mut r).unwrap();
        assert!(query_seen.insert(eq.to_bytes()));
    }
    conclude(
        "ciphertext freshness",
        data_seen.len() == 100 && query_seen.len() == 100,
        "100 re-encryptions of a fixed vector were pairwise distinct on both sides",
    );
}
