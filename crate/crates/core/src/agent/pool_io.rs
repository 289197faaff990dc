//! Model pool persistence.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    8  b"MCPMPOOL"
//! version  u32
//! hash     32 SHA-256 of the architecture's canonical string
//! arch     n_assets, obs_window, state_window, action_count, fc_width (u32)
//!          obs conv count u32, then (out, in, kernel, stride) u32 each
//!          state conv count u32, then specs
//! pools    sub-pool count u32;
//!          per sub-pool: rep_index u32, model count u32;
//!          per model: model_index u32, seed u64, init_seed u64,
//!                     final_sharpe f64, param len u64, params f64...
//! ```
//!
//! Loading recomputes the architecture hash from the parsed fields and
//! rejects the file on mismatch.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{ConvSpec, NetArchitecture, PolicyValueParams};
use super::{AgentError, ModelMeta, ModelPool, Result, SubPool, TrainedModel};

const MAGIC: &[u8; 8] = b"MCPMPOOL";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(AgentError::ArtifactFormat(format!(
                "truncated pool artifact at byte {}",
                self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_convs(out: &mut Vec<u8>, convs: &[ConvSpec]) {
    put_u32(out, convs.len() as u32);
    for c in convs {
        put_u32(out, c.out_channels as u32);
        put_u32(out, c.in_channels as u32);
        put_u32(out, c.kernel as u32);
        put_u32(out, c.stride as u32);
    }
}

fn read_convs(cur: &mut Cursor) -> Result<Vec<ConvSpec>> {
    let count = cur.u32()? as usize;
    if count > 64 {
        return Err(AgentError::ArtifactFormat(format!(
            "implausible conv count {count}"
        )));
    }
    (0..count)
        .map(|_| {
            Ok(ConvSpec {
                out_channels: cur.u32()? as usize,
                in_channels: cur.u32()? as usize,
                kernel: cur.u32()? as usize,
                stride: cur.u32()? as usize,
            })
        })
        .collect()
}

impl ModelPool {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.arch.hash());
        put_u32(&mut out, self.arch.n_assets as u32);
        put_u32(&mut out, self.arch.obs_window as u32);
        put_u32(&mut out, self.arch.state_window as u32);
        put_u32(&mut out, self.arch.action_count as u32);
        put_u32(&mut out, self.arch.fc_width as u32);
        put_convs(&mut out, &self.arch.obs_convs);
        put_convs(&mut out, &self.arch.state_convs);
        put_u32(&mut out, self.sub_pools.len() as u32);
        for sub in &self.sub_pools {
            put_u32(&mut out, sub.rep_index as u32);
            put_u32(&mut out, sub.models.len() as u32);
            for model in &sub.models {
                put_u32(&mut out, model.meta.model_index as u32);
                put_u64(&mut out, model.meta.seed);
                put_u64(&mut out, model.params.init_seed);
                put_f64(&mut out, model.meta.final_sharpe);
                put_u64(&mut out, model.params.values.len() as u64);
                for &v in &model.params.values {
                    put_f64(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut cur = Cursor { data, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(AgentError::ArtifactFormat("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(AgentError::ArtifactFormat(format!(
                "unsupported pool version {version}"
            )));
        }
        let stored_hash: [u8; 32] = cur.take(32)?.try_into().expect("32 bytes");
        let arch = NetArchitecture {
            n_assets: cur.u32()? as usize,
            obs_window: cur.u32()? as usize,
            state_window: cur.u32()? as usize,
            action_count: cur.u32()? as usize,
            fc_width: cur.u32()? as usize,
            obs_convs: read_convs(&mut cur)?,
            state_convs: read_convs(&mut cur)?,
        };
        if arch.hash() != stored_hash {
            return Err(AgentError::ArtifactFormat(
                "architecture hash mismatch".into(),
            ));
        }
        arch.validate()?;
        let expected_len = arch.param_count();
        let pool_count = cur.u32()? as usize;
        let mut sub_pools = Vec::with_capacity(pool_count);
        for _ in 0..pool_count {
            let rep_index = cur.u32()? as usize;
            let model_count = cur.u32()? as usize;
            let mut models = Vec::with_capacity(model_count);
            for _ in 0..model_count {
                let model_index = cur.u32()? as usize;
                let seed = cur.u64()?;
                let init_seed = cur.u64()?;
                let final_sharpe = cur.f64()?;
                let len = cur.u64()? as usize;
                if len != expected_len {
                    return Err(AgentError::ArtifactFormat(format!(
                        "parameter vector of {len} values, architecture needs {expected_len}"
                    )));
                }
                let mut values = Vec::with_capacity(len);
                for _ in 0..len {
                    values.push(cur.f64()?);
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(AgentError::ArtifactFormat(
                        "non-finite parameter value".into(),
                    ));
                }
                models.push(TrainedModel {
                    params: PolicyValueParams {
                        arch: arch.clone(),
                        values,
                        init_seed,
                    },
                    meta: ModelMeta {
                        rep_index,
                        model_index,
                        seed,
                        final_sharpe,
                    },
                    log: Vec::new(),
                });
            }
            if models.is_empty() {
                return Err(AgentError::EmptySubPool(rep_index));
            }
            sub_pools.push(SubPool { rep_index, models });
        }
        if cur.pos != data.len() {
            return Err(AgentError::ArtifactFormat(format!(
                "{} trailing bytes",
                data.len() - cur.pos
            )));
        }
        Ok(Self {
            arch,
            sub_pools,
            failures: Vec::new(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    /// Human-readable sidecar: architecture line, one line per model, and
    /// any recorded build failures.
    pub fn metadata_text(&self) -> String {
        let mut out = String::from("pool v1\n");
        out.push_str(&self.arch.canonical_string());
        out.push('\n');
        out.push_str(&format!(
            "sub_pools {} models {}\n",
            self.sub_pools.len(),
            self.model_count()
        ));
        for sub in &self.sub_pools {
            for m in &sub.models {
                out.push_str(&format!(
                    "model rep {} index {} seed {} final_sharpe {}\n",
                    m.meta.rep_index, m.meta.model_index, m.meta.seed, m.meta.final_sharpe
                ));
            }
        }
        for f in &self.failures {
            out.push_str(&format!("failure {f}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::tiny_pool_for_io_tests;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let pool = tiny_pool_for_io_tests();
        let bytes = pool.to_bytes();
        let back = ModelPool::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.arch, pool.arch);
        assert_eq!(back.sub_pools.len(), pool.sub_pools.len());
        for (a, b) in back.sub_pools.iter().zip(&pool.sub_pools) {
            assert_eq!(a.rep_index, b.rep_index);
            for (ma, mb) in a.models.iter().zip(&b.models) {
                assert_eq!(ma.meta, mb.meta);
                assert_eq!(ma.params.values, mb.params.values);
                assert_eq!(ma.params.init_seed, mb.params.init_seed);
            }
        }
    }

    #[test]
    fn corrupt_artifacts_are_rejected() {
        let pool = tiny_pool_for_io_tests();
        let bytes = pool.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ModelPool::from_bytes(&bad_magic),
            Err(AgentError::ArtifactFormat(_))
        ));

        // flip an architecture field: the stored hash no longer matches
        let mut bad_arch = bytes.clone();
        bad_arch[44] ^= 1; // first arch u32 after magic+version+hash
        assert!(matches!(
            ModelPool::from_bytes(&bad_arch),
            Err(AgentError::ArtifactFormat(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ModelPool::from_bytes(truncated),
            Err(AgentError::ArtifactFormat(_))
        ));
    }
}
