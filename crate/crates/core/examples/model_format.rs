//! Saves a masked network, reloads it and prints the header fields.

use chanprune::format;
use chanprune::{ChannelMask, Network};
use rand::SeedableRng;

fn main() -> chanprune::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut net = Network::reference([3, 8, 8], 3, [4, 4, 4, 4], &mut rng)?;
    net.set_mask(&ChannelMask::from_retained(0, 4, &[0, 2])?)?;
    let bytes = format::to_bytes(&net);
    println!("{} bytes; magic {:?}", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap_or("?"));
    println!("version {}", u16::from_le_bytes([bytes[4], bytes[5]]));
    let back = format::from_bytes(&bytes)?;
    assert_eq!(back, net);
    println!("round trip ok; layer 0 mask {:?}", back.mask(0).map(|m| m.retained()));
    Ok(())
}
