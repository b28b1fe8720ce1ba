//! Deterministic random streams.
//!
//! Every random draw in a run comes from a ChaCha20 keystream keyed by the
//! experiment seed and addressed by a 64-bit stream id built from
//! `(purpose, client, round)`. Two draws with different addresses never share
//! keystream, and a draw's value does not depend on how many other streams
//! were consumed before it, so clients can run on any number of threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// What a stream is used for. The discriminant occupies the top byte of the
/// stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    DataGeneration = 1,
    Split = 2,
    Partition = 3,
    ModelInit = 4,
    FisherSubsample = 5,
    BatchShuffle = 6,
    UpdateNoise = 7,
    Latency = 8,
    ClientKey = 9,
    Test = 0xff,
}

/// Client slot used by streams that do not belong to a client.
pub const NO_CLIENT: u32 = u32::MAX;

/// Packs `(purpose, client, round)` into a ChaCha stream id.
///
/// Layout: `purpose` in bits 56..64, `round` in bits 32..56 (24 bits),
/// `client` in bits 0..32.
pub fn stream_id(purpose: Purpose, client: u32, round: u32) -> u64 {
    debug_assert!(round < (1 << 24), "round index exceeds 24 bits");
    ((purpose as u64) << 56) | (((round as u64) & 0xff_ffff) << 32) | client as u64
}

/// Opens the stream addressed by `(purpose, client, round)` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, client: u32, round: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, client, round));
    rng
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `(0, 1]`, safe as a logarithm argument.
fn uniform_open_zero<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sampler using the Box–Muller transform. Both outputs of a
/// transform are used; the spare is cached.
#[derive(Debug)]
pub struct Normal<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> Normal<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = uniform_open_zero(&mut self.rng);
        let u2 = uniform(&mut self.rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}

/// Laplace(0, b) draw by inverse CDF.
pub fn laplace<R: RngCore + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    // u in (-0.5, 0.5]
    let u = uniform_open_zero(rng) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Fisher–Yates shuffle driven by `rng`.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
