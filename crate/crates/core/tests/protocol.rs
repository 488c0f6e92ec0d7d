mod common;

use fedgraph::data::{gen_moons, partition_clients};
use fedgraph::federation::{
    client_round, decode_feedback, decode_message, encode_feedback, encode_message, message_size_report,
    run_iterative, server_round, FederationConfig,
};
use fedgraph::embedder::EmbedderConfig;
use fedgraph::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{mutate, random_feedback, random_upload, split};

#[test]
fn random_uploads_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let msg = random_upload(&mut rng);
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&bytes).unwrap(), msg);
    }
}

#[test]
fn random_feedback_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let fb = random_feedback(&mut rng);
        let bytes = encode_feedback(&fb).unwrap();
        assert_eq!(decode_feedback(&bytes).unwrap(), fb);
    }
}

#[test]
fn mutated_frames_never_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let bytes = encode_message(&random_upload(&mut rng)).unwrap();
        let bad = mutate(&bytes, &mut rng);
        match decode_message(&bad) {
            Err(Error::Decode { offset, .. }) => assert!(offset <= bad.len()),
            other => panic!("mutation decoded: {other:?}"),
        }
        let fb = encode_feedback(&random_feedback(&mut rng)).unwrap();
        assert!(decode_feedback(&mutate(&fb, &mut rng)).is_err());
    }
}

#[test]
fn frames_of_one_kind_do_not_decode_as_the_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let up = encode_message(&random_upload(&mut rng)).unwrap();
    let fb = encode_feedback(&random_feedback(&mut rng)).unwrap();
    assert!(decode_feedback(&up).is_err());
    assert!(decode_message(&fb).is_err());
}

fn moons_clients(n: usize, seed: u64) -> Vec<fedgraph::graph::PointSet> {
    let ds = gen_moons(n, 0.06, seed).unwrap();
    let plan = partition_clients(&ds, 2, 0.0, seed).unwrap();
    split(&ds, &plan.clients).0
}

#[test]
fn doubling_samples_at_most_doubles_bytes() {
    let cfg = FederationConfig { clusters: 2, neighbors: 10, epsilon: 1.0, seed: 3, ..FederationConfig::default() };
    let small = moons_clients(400, 3);
    let large = moons_clients(800, 3);
    let a = message_size_report(&client_round(0, &small[0], &cfg, None).unwrap()).unwrap();
    let b = message_size_report(&client_round(0, &large[0], &cfg, None).unwrap()).unwrap();
    assert_eq!(b.samples, 2 * a.samples);
    let ratio = b.bytes as f64 / a.bytes as f64;
    assert!(ratio <= 2.2, "ratio {ratio}");
    assert!(a.within_bound && b.within_bound);
}

#[test]
fn smallest_legal_client_reports_cleanly() {
    let cfg = FederationConfig { clusters: 1, neighbors: 2, seed: 1, ..FederationConfig::default() };
    let pts = fedgraph::graph::PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.1], vec![0.2, 0.9], vec![1.1, 1.0]]).unwrap();
    let msg = client_round(0, &pts, &cfg, None).unwrap();
    let report = message_size_report(&msg).unwrap();
    assert_eq!(report.samples, 4);
    assert!(report.within_bound);
    assert!(report.bytes > 0);
}

#[test]
fn uploads_carry_no_raw_coordinates() {
    let cfg = FederationConfig { clusters: 2, epsilon: 1.0, seed: 5, ..FederationConfig::default() };
    let clients = moons_clients(300, 5);
    for (k, data) in clients.iter().enumerate() {
        let msg = client_round(k as u32, data, &cfg, None).unwrap();
        let bytes = encode_message(&msg).unwrap();
        for row in data.iter_rows() {
            for v in row {
                let pattern = v.to_bits().to_le_bytes();
                assert!(!bytes.windows(8).any(|w| w == pattern), "raw value {v} leaked");
            }
        }
    }
}

#[test]
fn server_sees_only_uploads() {
    let cfg = FederationConfig { clusters: 2, epsilon: 1.0, seed: 6, ..FederationConfig::default() };
    let clients = moons_clients(300, 6);
    let uploads: Vec<_> = clients
        .iter()
        .enumerate()
        .map(|(k, d)| decode_message(&encode_message(&client_round(k as u32, d, &cfg, None).unwrap()).unwrap()).unwrap())
        .collect();
    let (result, feedback) = server_round(&uploads, &cfg).unwrap();
    assert_eq!(result.assignments.labels.len(), 300);
    assert_eq!(feedback.len(), 2);
    for (fb, up) in feedback.iter().zip(&uploads) {
        assert_eq!(fb.assignments.len(), up.graph.n());
        assert_eq!(decode_feedback(&encode_feedback(fb).unwrap()).unwrap(), *fb);
    }
}

#[test]
fn full_iterative_run_is_byte_deterministic() {
    let cfg = FederationConfig {
        clusters: 2,
        epsilon: 1.0,
        rounds: 2,
        seed: 9,
        embedder: EmbedderConfig { epochs: 20, ..EmbedderConfig::linear_dec() },
        ..FederationConfig::default()
    };
    let clients = moons_clients(200, 9);
    let a = run_iterative(&clients, &cfg, None).unwrap();
    let b = run_iterative(&clients, &cfg, None).unwrap();
    assert_eq!(a.client_labels, b.client_labels);
    assert_eq!(a.upload_history, b.upload_history);
    assert_eq!(serde_json::to_vec(&a.trace).unwrap(), serde_json::to_vec(&b.trace).unwrap());
    assert_eq!(a.noise_draws, b.noise_draws);
    for k in 0..2u32 {
        let x = client_round(k, &clients[k as usize], &cfg, None).unwrap();
        let y = client_round(k, &clients[k as usize], &cfg, None).unwrap();
        assert_eq!(encode_message(&x).unwrap(), encode_message(&y).unwrap());
    }
}
