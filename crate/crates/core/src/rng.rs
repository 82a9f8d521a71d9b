//! Seeded SplitMix64 streams, one per concern, so that drawing more numbers
//! for one purpose never shifts the numbers another purpose sees.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Augment,
    Shuffle,
    Data,
    Check,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Init => 0x1b87_3593_c2b2_ae35,
            Stream::Augment => 0x85eb_ca6b_27d4_eb2f,
            Stream::Shuffle => 0x1656_67b1_9e37_79f9,
            Stream::Data => 0x9e37_79b9_7f4a_7c15,
            Stream::Check => 0xc2b2_ae3d_27d4_eb4f,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ which.salt())
}
