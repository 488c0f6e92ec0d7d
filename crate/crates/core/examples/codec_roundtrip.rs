//! Encodes a client upload, checks the frame round-trips and shows that a
//! single flipped bit is rejected.

use fedgraph::data::gen_moons;
use fedgraph::federation::{client_round, decode_message, encode_message, message_size_report, FederationConfig};

fn main() -> fedgraph::Result<()> {
    let ds = gen_moons(300, 0.06, 4)?;
    let cfg = FederationConfig { clusters: 2, epsilon: 1.0, ..FederationConfig::default() };
    let msg = client_round(0, &ds.points, &cfg, None)?;
    let bytes = encode_message(&msg)?;
    assert_eq!(decode_message(&bytes)?, msg);

    let size = message_size_report(&msg)?;
    println!(
        "{} bytes for {} samples, {} nonzeros (bound {}), within bound {}",
        size.bytes, size.samples, size.nonzeros, size.bound, size.within_bound
    );

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x10;
    match decode_message(&bad) {
        Err(e) => println!("corrupted frame rejected: {e}"),
        Ok(_) => unreachable!("checksum must catch a flipped bit"),
    }
    Ok(())
}
