use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Named random sub-stream derived from a root seed.
///
/// Every consumer of randomness gets its own stream (`root/rollouts`,
/// `root/balance`, ...) and draws per-item generators from it by index, so
/// results do not depend on iteration order or thread scheduling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
    path: String,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            path: String::new(),
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Self {
            root: self.root,
            path: format!("{}/{}", self.path, name),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn rng(&self, indices: &[u64]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update(self.path.as_bytes());
        for i in indices {
            h.update([0xff]);
            h.update(i.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}
