//! Versioned binary wire format.
//!
//! Frame: `"SPFG"` | u16 version | u8 kind | u32 payload length | payload |
//! u32 CRC-32 of everything before it. Integers little-endian, floats as
//! 8-byte IEEE bit patterns, counts and indices as u32.
//!
//! Upload payload: client_id, round, graph, prototype set, local labels.
//! Feedback payload: client_id, round, cluster_count, assignments, global
//! prototype set.
//!
//! Graph: n, row_capacity, then per row a length and `(col u32, weight f64)`
//! pairs. Prototype set: client_id, dim, form u8 (0 full, 1 diagonal),
//! noised u8, epsilon_spent, count, then per prototype the weight, `dim`
//! mean entries and `dim * dim` row-major covariance entries.

use super::{GlobalFeedback, UploadMessage};
use crate::error::{Error, Result};
use crate::graph::StructuralGraph;
use crate::prototypes::{CovarianceForm, Prototype, PrototypeSet};

pub const MAGIC: &[u8; 4] = b"SPFG";
pub const SCHEMA_VERSION: u16 = 1;
const KIND_UPLOAD: u8 = 1;
const KIND_FEEDBACK: u8 = 2;
const HEADER_LEN: usize = 11;
const CRC_LEN: usize = 4;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the wire format")))?;
        self.u32(v);
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn graph(&mut self, g: &StructuralGraph) -> Result<()> {
        self.count(g.n())?;
        self.count(g.row_capacity())?;
        for row in g.rows() {
            self.count(row.len())?;
            for &(c, w) in row {
                self.count(c)?;
                self.f64(w);
            }
        }
        Ok(())
    }

    fn prototypes(&mut self, p: &PrototypeSet) -> Result<()> {
        self.u32(p.client_id);
        self.count(p.dim)?;
        self.u8(match p.form {
            CovarianceForm::Full => 0,
            CovarianceForm::Diagonal => 1,
        });
        self.u8(u8::from(p.noised));
        self.f64(p.epsilon_spent);
        self.count(p.len())?;
        for proto in &p.prototypes {
            if proto.mean.len() != p.dim || proto.covariance.len() != p.dim * p.dim {
                return Err(Error::invalid("prototype shape does not match the set dimension"));
            }
            self.f64(proto.weight);
            proto.mean.iter().chain(&proto.covariance).for_each(|&v| self.f64(v));
        }
        Ok(())
    }

    fn labels(&mut self, labels: &[usize]) -> Result<()> {
        self.count(labels.len())?;
        labels.iter().try_for_each(|&l| self.count(l))
    }

    fn frame(version: u16, kind: u8, payload: Vec<u8>) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN));
        w.0.extend_from_slice(MAGIC);
        w.u16(version);
        w.u8(kind);
        w.count(payload.len())?;
        w.0.extend_from_slice(&payload);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Decode {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} more bytes"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// A count of items that each take at least `min_bytes`; rejects counts
    /// the remaining buffer cannot hold.
    fn bounded_count(&mut self, min_bytes: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.count()?;
        if n.saturating_mul(min_bytes) > self.buf.len() - self.pos {
            self.pos = at;
            return self.fail(format!("count {n} exceeds the remaining payload"));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
    }

    fn graph(&mut self) -> Result<StructuralGraph> {
        let start = self.pos;
        let n = self.bounded_count(4)?;
        let capacity = self.count()?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.bounded_count(12)?;
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                row.push((self.count()?, self.f64()?));
            }
            rows.push(row);
        }
        StructuralGraph::new(n, capacity, rows).map_err(|e| Error::Decode {
            offset: start,
            reason: format!("graph rejected: {e}"),
        })
    }

    fn prototypes(&mut self) -> Result<PrototypeSet> {
        let start = self.pos;
        let client_id = self.u32()?;
        let dim = self.count()?;
        let form = match self.u8()? {
            0 => CovarianceForm::Full,
            1 => CovarianceForm::Diagonal,
            other => {
                self.pos -= 1;
                return self.fail(format!("unknown covariance form {other}"));
            }
        };
        let noised = match self.u8()? {
            0 => false,
            1 => true,
            other => {
                self.pos -= 1;
                return self.fail(format!("invalid flag {other}"));
            }
        };
        let epsilon_spent = self.f64()?;
        let per = 8usize.saturating_mul(1 + dim.saturating_add(dim.saturating_mul(dim)));
        let count = self.bounded_count(per)?;
        let mut prototypes = Vec::with_capacity(count);
        for _ in 0..count {
            let weight = self.f64()?;
            let mean = (0..dim).map(|_| self.f64()).collect::<Result<_>>()?;
            let covariance = (0..dim * dim).map(|_| self.f64()).collect::<Result<_>>()?;
            prototypes.push(Prototype {
                mean,
                covariance,
                weight,
            });
        }
        let set = PrototypeSet {
            client_id,
            dim,
            form,
            prototypes,
            noised,
            epsilon_spent,
        };
        set.validate().map_err(|e| Error::Decode {
            offset: start,
            reason: format!("prototypes rejected: {e}"),
        })?;
        Ok(set)
    }

    fn labels(&mut self) -> Result<Vec<usize>> {
        let n = self.bounded_count(4)?;
        (0..n).map(|_| self.count()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Checks the frame and returns the version and a reader over the payload.
fn open_frame(bytes: &[u8], kind: u8) -> Result<(u16, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < HEADER_LEN + CRC_LEN {
        r.pos = bytes.len();
        return r.fail("truncated frame");
    }
    if &bytes[..4] != MAGIC {
        return r.fail("bad magic");
    }
    r.pos = 4;
    let version = r.u16()?;
    if version != SCHEMA_VERSION {
        r.pos = 4;
        return r.fail(format!("unsupported schema version {version}"));
    }
    let found = r.u8()?;
    if found != kind {
        r.pos = 6;
        return r.fail(format!("message kind {found}, expected {kind}"));
    }
    let len = r.count()?;
    if bytes.len() != HEADER_LEN + len + CRC_LEN {
        r.pos = 7;
        return r.fail(format!("payload length {len} does not match frame size {}", bytes.len()));
    }
    let body = &bytes[..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        r.pos = HEADER_LEN + len;
        return r.fail("checksum mismatch");
    }
    Ok((version, Reader { buf: body, pos: HEADER_LEN }))
}

pub fn encode_message(msg: &UploadMessage) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.u32(msg.client_id);
    w.u32(msg.round);
    w.graph(&msg.graph)?;
    w.prototypes(&msg.prototypes)?;
    w.labels(&msg.local_labels)?;
    Writer::frame(msg.schema_version, KIND_UPLOAD, w.0)
}

pub fn decode_message(bytes: &[u8]) -> Result<UploadMessage> {
    let (schema_version, mut r) = open_frame(bytes, KIND_UPLOAD)?;
    let client_id = r.u32()?;
    let round = r.u32()?;
    let graph = r.graph()?;
    let prototypes = r.prototypes()?;
    let labels_at = r.pos;
    let local_labels = r.labels()?;
    r.finish()?;
    if local_labels.len() != graph.n() {
        r.pos = labels_at;
        return r.fail(format!("{} labels for {} graph rows", local_labels.len(), graph.n()));
    }
    Ok(UploadMessage {
        schema_version,
        client_id,
        round,
        graph,
        prototypes,
        local_labels,
    })
}

pub fn encode_feedback(fb: &GlobalFeedback) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.u32(fb.client_id);
    w.u32(fb.round);
    w.count(fb.cluster_count)?;
    w.labels(&fb.assignments)?;
    w.prototypes(&fb.global_prototypes)?;
    Writer::frame(fb.schema_version, KIND_FEEDBACK, w.0)
}

pub fn decode_feedback(bytes: &[u8]) -> Result<GlobalFeedback> {
    let (schema_version, mut r) = open_frame(bytes, KIND_FEEDBACK)?;
    let client_id = r.u32()?;
    let round = r.u32()?;
    let cluster_count = r.count()?;
    let labels_at = r.pos;
    let assignments = r.labels()?;
    if assignments.iter().any(|&l| l >= cluster_count) {
        r.pos = labels_at;
        return r.fail(format!("assignment outside 0..{cluster_count}"));
    }
    let global_prototypes = r.prototypes()?;
    r.finish()?;
    Ok(GlobalFeedback {
        schema_version,
        client_id,
        round,
        cluster_count,
        assignments,
        global_prototypes,
    })
}
