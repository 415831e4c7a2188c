//! Named random substreams derived from one scenario seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that
//! enabling one feature (an attack, a watermark) never shifts the draws seen
//! by another.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Loads,
    Process,
    Measurement,
    /// Watermark of one area.
    Watermark(usize),
    Attack,
    /// Monte Carlo sampling for threshold calibration.
    Calibration,
}

impl Stream {
    /// ChaCha stream id: the kind in the high word, the index in the low word.
    pub fn id(self) -> u64 {
        let (kind, index) = match self {
            Stream::Loads => (1u64, 0u64),
            Stream::Process => (2, 0),
            Stream::Measurement => (3, 0),
            Stream::Watermark(area) => (4, area as u64),
            Stream::Attack => (5, 0),
            Stream::Calibration => (6, 0),
        };
        (kind << 32) | index
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_and_repeat() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(7, Stream::Loads).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = stream_rng(7, Stream::Loads).random();
        let y: u64 = stream_rng(7, Stream::Process).random();
        let z: u64 = stream_rng(7, Stream::Watermark(1)).random();
        let w: u64 = stream_rng(7, Stream::Watermark(2)).random();
        assert!(x != y && y != z && z != w);
    }
}
