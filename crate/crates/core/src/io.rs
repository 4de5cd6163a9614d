//! Sample files. Full configurations use the "HISN1" layout
//! (magic, N, count, bit-packed rows); compact gadget samples use "HISC1"
//! (magic, |𝓢|, m, count, then per row the packed 𝓢 bits and m little-endian
//! u128 sector counts). Both have a JSON twin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::CompactSample;
use crate::spin::SpinConfiguration;

pub const FULL_MAGIC: &[u8; 5] = b"HISN1";
pub const COMPACT_MAGIC: &[u8; 5] = b"HISC1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleSet {
    Full { n: usize, configs: Vec<SpinConfiguration> },
    Compact { n_sites: usize, m: usize, samples: Vec<CompactSample> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SampleJson {
    Full { n: usize, rows: Vec<String> },
    Compact { n_sites: usize, m: usize, rows: Vec<CompactRow> },
}

#[derive(Serialize, Deserialize)]
struct CompactRow {
    s: String,
    k: Vec<String>,
}

fn pack(spins: impl Iterator<Item = bool>, n: usize, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + n.div_ceil(8), 0);
    for (i, b) in spins.enumerate() {
        if b {
            out[start + i / 8] |= 1 << (i % 8);
        }
    }
}

fn unpack(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn bit_string(bits: impl Iterator<Item = bool>) -> String {
    bits.map(|b| if b { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Format(format!("bad bit character {c:?}"))),
        })
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("sample file truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

impl SampleSet {
    pub fn len(&self) -> usize {
        match self {
            SampleSet::Full { configs, .. } => configs.len(),
            SampleSet::Compact { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            SampleSet::Full { n, configs } => {
                out.extend_from_slice(FULL_MAGIC);
                out.extend_from_slice(&(*n as u64).to_le_bytes());
                out.extend_from_slice(&(configs.len() as u64).to_le_bytes());
                for c in configs {
                    pack(c.bits().into_iter(), *n, &mut out);
                }
            }
            SampleSet::Compact { n_sites, m, samples } => {
                out.extend_from_slice(COMPACT_MAGIC);
                for x in [*n_sites, *m, samples.len()] {
                    out.extend_from_slice(&(x as u64).to_le_bytes());
                }
                for s in samples {
                    pack(s.s.iter().map(|&x| x > 0), *n_sites, &mut out);
                    s.k.iter().for_each(|k| out.extend_from_slice(&k.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        let magic = rd.take(5)?;
        let set = if magic == FULL_MAGIC {
            let n = rd.u64()?;
            let count = rd.u64()?;
            let configs = (0..count)
                .map(|_| Ok(SpinConfiguration::from_bits(&unpack(rd.take(n.div_ceil(8))?, n))))
                .collect::<Result<_>>()?;
            SampleSet::Full { n, configs }
        } else if magic == COMPACT_MAGIC {
            let n_sites = rd.u64()?;
            let m = rd.u64()?;
            let count = rd.u64()?;
            let samples = (0..count)
                .map(|_| {
                    let s = unpack(rd.take(n_sites.div_ceil(8))?, n_sites)
                        .into_iter()
                        .map(|b| if b { 1 } else { -1 })
                        .collect();
                    let k = (0..m)
                        .map(|_| Ok(u128::from_le_bytes(rd.take(16)?.try_into().expect("16 bytes"))))
                        .collect::<Result<_>>()?;
                    Ok(CompactSample { s, k })
                })
                .collect::<Result<_>>()?;
            SampleSet::Compact { n_sites, m, samples }
        } else {
            return Err(Error::Format("unknown sample file magic".into()));
        };
        if rd.pos != buf.len() {
            return Err(Error::Format("trailing bytes after samples".into()));
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        let j = match self {
            SampleSet::Full { n, configs } => SampleJson::Full {
                n: *n,
                rows: configs.iter().map(|c| bit_string(c.bits().into_iter())).collect(),
            },
            SampleSet::Compact { n_sites, m, samples } => SampleJson::Compact {
                n_sites: *n_sites,
                m: *m,
                rows: samples
                    .iter()
                    .map(|s| CompactRow {
                        s: bit_string(s.s.iter().map(|&x| x > 0)),
                        k: s.k.iter().map(|k| k.to_string()).collect(),
                    })
                    .collect(),
            },
        };
        Ok(crate::jsonfmt::to_string(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: SampleJson = serde_json::from_str(text)?;
        Ok(match j {
            SampleJson::Full { n, rows } => SampleSet::Full {
                n,
                configs: rows
                    .iter()
                    .map(|r| {
                        let b = parse_bits(r)?;
                        crate::error::check_len(n, b.len())?;
                        Ok(SpinConfiguration::from_bits(&b))
                    })
                    .collect::<Result<_>>()?,
            },
            SampleJson::Compact { n_sites, m, rows } => SampleSet::Compact {
                n_sites,
                m,
                samples: rows
                    .iter()
                    .map(|r| {
                        let b = parse_bits(&r.s)?;
                        crate::error::check_len(n_sites, b.len())?;
                        crate::error::check_len(m, r.k.len())?;
                        let k = r
                            .k
                            .iter()
                            .map(|x| x.parse::<u128>().map_err(|e| Error::Format(e.to_string())))
                            .collect::<Result<_>>()?;
                        Ok(CompactSample {
                            s: b.into_iter().map(|x| if x { 1 } else { -1 }).collect(),
                            k,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
        })
    }

    /// Reads either encoding, sniffing the magic.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.starts_with(FULL_MAGIC) || buf.starts_with(COMPACT_MAGIC) {
            Self::from_bytes(buf)
        } else {
            let text = std::str::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(text)
        }
    }
}
