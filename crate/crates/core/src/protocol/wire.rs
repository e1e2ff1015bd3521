//! Frame encoding. Layout is documented byte-for-byte in `docs/wire-format.md`.

use std::io::Read;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const WIRE_MAGIC: &[u8; 8] = b"SFZWIRE\0";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on a frame body; larger lengths are treated as corruption.
pub const MAX_BODY_LEN: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    pub fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            ElemType::F32 => 1,
            ElemType::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(ElemType::F32),
            2 => Ok(ElemType::F64),
            _ => Err(Error::Wire(format!("unknown element type {c}"))),
        }
    }
}

/// Routing fields of an activation batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchHeader {
    pub device_id: u32,
    pub round: u32,
    pub batch_id: u32,
    pub produced_at_layer: u32,
}

/// Activations of one device mini-batch, as produced by its frozen prefix.
/// Rows of the decoded tensor are sample-major: `batch * seq` rows of `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub device_id: u32,
    pub round: u32,
    pub batch_id: u32,
    pub produced_at_layer: u32,
    pub batch: u32,
    pub seq: u32,
    pub width: u32,
    pub elem: ElemType,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<u32>,
    /// Little-endian elements.
    pub payload: Vec<u8>,
}

impl ActivationBatch {
    pub fn from_tensor(
        header: BatchHeader,
        seq: usize,
        acts: &Tensor2D,
        sample_ids: Vec<u64>,
        labels: Vec<u32>,
        elem: ElemType,
    ) -> Result<Self> {
        if seq == 0 || !acts.rows().is_multiple_of(seq) {
            return Err(Error::Wire(format!(
                "{} rows is not a multiple of seq {seq}",
                acts.rows()
            )));
        }
        let mut payload = Vec::with_capacity(acts.data().len() * elem.size());
        for &v in acts.data() {
            match elem {
                ElemType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                ElemType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let b = Self {
            device_id: header.device_id,
            round: header.round,
            batch_id: header.batch_id,
            produced_at_layer: header.produced_at_layer,
            batch: (acts.rows() / seq) as u32,
            seq: seq as u32,
            width: acts.cols() as u32,
            elem,
            sample_ids,
            labels,
            payload,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.batch as usize;
        let expected = n * self.seq as usize * self.width as usize * self.elem.size();
        if self.payload.len() != expected {
            return Err(Error::Wire(format!(
                "payload is {} bytes, shape needs {expected}",
                self.payload.len()
            )));
        }
        if self.sample_ids.len() != n || self.labels.len() != n {
            return Err(Error::Wire(format!(
                "batch of {n} carries {} ids and {} labels",
                self.sample_ids.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Result<Tensor2D> {
        self.validate()?;
        let data: Vec<f64> = match self.elem {
            ElemType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            ElemType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor2D::from_vec((self.batch * self.seq) as usize, self.width as usize, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSummary {
    pub round: u32,
    pub steps: u32,
    pub samples: u32,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// One-time layer-count metadata.
    Register {
        device_id: u32,
        assigned_layers: u32,
    },
    Activations(ActivationBatch),
    /// The device has sent every batch of `round`.
    RoundEnd {
        device_id: u32,
        round: u32,
    },
    RoundSummary(RoundSummary),
    Shutdown,
}

impl Message {
    pub fn type_code(&self) -> u16 {
        match self {
            Message::Register { .. } => 1,
            Message::Activations(_) => 2,
            Message::RoundEnd { .. } => 3,
            Message::RoundSummary(_) => 4,
            Message::Shutdown => 5,
        }
    }
}

fn body(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Register {
            device_id,
            assigned_layers,
        } => {
            out.extend_from_slice(&device_id.to_be_bytes());
            out.extend_from_slice(&assigned_layers.to_be_bytes());
        }
        Message::Activations(b) => {
            for v in [
                b.device_id,
                b.round,
                b.batch_id,
                b.produced_at_layer,
                b.batch,
                b.seq,
                b.width,
            ] {
                out.extend_from_slice(&v.to_be_bytes());
            }
            out.extend_from_slice(&[b.elem.code(), 0, 0, 0]);
            for id in &b.sample_ids {
                out.extend_from_slice(&id.to_be_bytes());
            }
            for y in &b.labels {
                out.extend_from_slice(&y.to_be_bytes());
            }
            out.extend_from_slice(&(b.payload.len() as u32).to_be_bytes());
            out.extend_from_slice(&b.payload);
        }
        Message::RoundEnd { device_id, round } => {
            out.extend_from_slice(&device_id.to_be_bytes());
            out.extend_from_slice(&round.to_be_bytes());
        }
        Message::RoundSummary(s) => {
            for v in [s.round, s.steps, s.samples] {
                out.extend_from_slice(&v.to_be_bytes());
            }
            out.extend_from_slice(&s.mean_loss.to_bits().to_be_bytes());
        }
        Message::Shutdown => {}
    }
    out
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let body = body(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_be_bytes());
    out.extend_from_slice(&msg.type_code().to_be_bytes());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses a frame header, returning `(msg_type, body_len)`.
pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(u16, u32)> {
    if &h[..8] != WIRE_MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = u16::from_be_bytes([h[8], h[9]]);
    if version != WIRE_VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let ty = u16::from_be_bytes([h[10], h[11]]);
    let len = u32::from_be_bytes([h[12], h[13], h[14], h[15]]);
    if len > MAX_BODY_LEN {
        return Err(Error::Wire(format!("body length {len} exceeds limit")));
    }
    Ok((ty, len))
}

struct Body<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Wire("truncated body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_body(ty: u16, buf: &[u8]) -> Result<Message> {
    let mut b = Body { buf, pos: 0 };
    let msg = match ty {
        1 => Message::Register {
            device_id: b.u32()?,
            assigned_layers: b.u32()?,
        },
        2 => {
            let mut f = [0u32; 7];
            for v in &mut f {
                *v = b.u32()?;
            }
            let [device_id, round, batch_id, produced_at_layer, batch, seq, width] = f;
            let elem = ElemType::from_code(b.take(4)?[0])?;
            let n = batch as usize;
            if n > buf.len() {
                return Err(Error::Wire("batch count exceeds body".into()));
            }
            let sample_ids = (0..n).map(|_| b.u64()).collect::<Result<Vec<_>>>()?;
            let labels = (0..n).map(|_| b.u32()).collect::<Result<Vec<_>>>()?;
            let len = b.u32()? as usize;
            let payload = b.take(len)?.to_vec();
            let batch = ActivationBatch {
                device_id,
                round,
                batch_id,
                produced_at_layer,
                batch,
                seq,
                width,
                elem,
                sample_ids,
                labels,
                payload,
            };
            batch.validate()?;
            Message::Activations(batch)
        }
        3 => Message::RoundEnd {
            device_id: b.u32()?,
            round: b.u32()?,
        },
        4 => Message::RoundSummary(RoundSummary {
            round: b.u32()?,
            steps: b.u32()?,
            samples: b.u32()?,
            mean_loss: f64::from_bits(b.u64()?),
        }),
        5 => Message::Shutdown,
        other => return Err(Error::Wire(format!("unknown message type {other}"))),
    };
    if b.pos != buf.len() {
        return Err(Error::Wire("trailing bytes in body".into()));
    }
    Ok(msg)
}

pub fn decode(frame: &[u8]) -> Result<Message> {
    let header: &[u8; HEADER_LEN] = frame
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Wire("frame shorter than header".into()))?;
    let (ty, len) = decode_header(header)?;
    if frame.len() - HEADER_LEN != len as usize {
        return Err(Error::Wire(format!(
            "header announces {len} body bytes, frame has {}",
            frame.len() - HEADER_LEN
        )));
    }
    decode_body(ty, &frame[HEADER_LEN..])
}

/// Reads one whole frame. `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Wire("stream ended inside a frame header".into()));
        }
        got += n;
    }
    let (_, len) = decode_header(&header)?;
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + len as usize, 0);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch(elem: ElemType) -> ActivationBatch {
        let acts = Tensor2D::from_fn(4, 3, |r, c| r as f64 * 0.5 - c as f64);
        let header = BatchHeader {
            device_id: 7,
            round: 2,
            batch_id: 9,
            produced_at_layer: 1,
        };
        ActivationBatch::from_tensor(header, 2, &acts, vec![10, 11], vec![0, 1], elem).unwrap()
    }

    #[test]
    fn every_message_round_trips() {
        let msgs = [
            Message::Register {
                device_id: 3,
                assigned_layers: 2,
            },
            Message::Activations(sample_batch(ElemType::F32)),
            Message::Activations(sample_batch(ElemType::F64)),
            Message::RoundEnd { device_id: 3, round: 4 },
            Message::RoundSummary(RoundSummary {
                round: 1,
                steps: 2,
                samples: 40,
                mean_loss: 0.123456789,
            }),
            Message::Shutdown,
        ];
        for m in msgs {
            let frame = encode(&m);
            assert_eq!(decode(&frame).unwrap(), m);
            assert_eq!(read_frame(&mut frame.as_slice()).unwrap().unwrap(), frame);
        }
    }

    #[test]
    fn header_layout() {
        let frame = encode(&Message::Shutdown);
        assert_eq!(frame.len(), HEADER_LEN);
        assert_eq!(&frame[..8], b"SFZWIRE\0");
        assert_eq!(&frame[8..], &[0, 1, 0, 5, 0, 0, 0, 0]);
    }

    #[test]
    fn tensor_round_trip() {
        let b = sample_batch(ElemType::F64);
        assert_eq!(b.payload.len(), 4 * 3 * 8);
        let t = b.to_tensor().unwrap();
        assert_eq!(t, Tensor2D::from_fn(4, 3, |r, c| r as f64 * 0.5 - c as f64));
        assert_eq!(sample_batch(ElemType::F32).payload.len(), 4 * 3 * 4);
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let mut frame = encode(&Message::Activations(sample_batch(ElemType::F32)));
        assert!(decode(&frame[..frame.len() - 1]).is_err());
        frame[0] = b'X';
        assert!(decode(&frame).is_err());
        let mut v = encode(&Message::Shutdown);
        v[9] = 9;
        assert!(decode(&v).is_err());
        assert!(decode_body(77, &[]).is_err());
        assert!(read_frame(&mut &encode(&Message::Shutdown)[..5]).is_err());
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut b = sample_batch(ElemType::F32);
        b.payload.pop();
        assert!(b.validate().is_err());
        let mut b = sample_batch(ElemType::F32);
        b.labels.push(0);
        assert!(b.validate().is_err());
    }
}
