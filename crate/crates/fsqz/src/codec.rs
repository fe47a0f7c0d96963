//! Versioned binary wire format for model messages.
//!
//! Every message is a fixed 26-byte header followed by one payload, with the
//! payload optionally wrapped in a raw DEFLATE envelope (fixed level 6).
//! All integers are little-endian. Header layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FSQZ"
//! 4       1     version (currently 1)
//! 5       1     direction: 0 server-to-client, 1 client-to-server
//! 6       1     payload kind: 0 dense_f32, 1 sparse_f32, 2 quant_int, 3 binary
//! 7       1     flags: bit0 deflate envelope, bit1 sparse bitmap index mode
//! 8       4     round number
//! 12      4     sender id (server is 0)
//! 16      8     parameter count
//! 24      2     reserved, must be zero
//! ```
//!
//! Payload bodies (before the optional envelope):
//!
//! - dense_f32: `param_count` f32 values.
//! - sparse_f32: nonzero count as u64, then indices, then the nonzero f32
//!   values. Indices are either LEB128 varints of index deltas (first index
//!   absolute, later ones strictly positive gaps) or an MSB-first bitmap of
//!   `ceil(param_count / 8)` bytes; whichever is smaller wins, recorded in
//!   header bit1.
//! - quant_int: bit width u8 (4 or 8), layer count u16, then per layer its
//!   code count u32, scale exponent i8, and packed codes (8-bit: one byte
//!   each; 4-bit: two's-complement nibbles, low nibble first, zero padding).
//! - binary: MSB-first sign bitmap, set bit = +1, zero padding bits.

use std::fmt;

use crate::compress::{qmax, QuantLayer, QuantizedModel};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSQZ";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 26;

/// Inflation output cap; no legitimate message at this crate's scale comes
/// close, so anything larger is treated as corrupt.
const MAX_INFLATED: usize = 1 << 30;

const FLAG_DEFLATED: u8 = 0b01;
const FLAG_BITMAP: u8 = 0b10;

/// Fixed DEFLATE level for the envelope; part of the format contract so both
/// ends agree on measured sizes.
pub const DEFLATE_LEVEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ServerToClient = 0,
    ClientToServer = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    DenseF32 = 0,
    SparseF32 = 1,
    QuantInt = 2,
    Binary = 3,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PayloadKind::DenseF32 => "dense_f32",
            PayloadKind::SparseF32 => "sparse_f32",
            PayloadKind::QuantInt => "quant_int",
            PayloadKind::Binary => "binary",
        };
        f.write_str(s)
    }
}

/// How a sparse payload stores its indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Varint,
    Bitmap,
}

/// Decoded message header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub direction: Direction,
    pub kind: PayloadKind,
    pub round: u32,
    pub sender_id: u32,
    pub param_count: u64,
    pub compressed: bool,
    pub index_mode: IndexMode,
}

/// One model's worth of parameters in wire form.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f32>),
    Sparse {
        /// Logical vector length (the model's parameter count).
        len: u64,
        indices: Vec<u64>,
        values: Vec<f32>,
        mode: IndexMode,
    },
    Quant(QuantizedModel),
    Binary {
        signs: Vec<i8>,
    },
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Dense(_) => PayloadKind::DenseF32,
            Payload::Sparse { .. } => PayloadKind::SparseF32,
            Payload::Quant(_) => PayloadKind::QuantInt,
            Payload::Binary { .. } => PayloadKind::Binary,
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Payload::Dense(v) => v.len() as u64,
            Payload::Sparse { len, .. } => *len,
            Payload::Quant(q) => q.param_count() as u64,
            Payload::Binary { signs } => signs.len() as u64,
        }
    }

    /// Extracts the nonzero entries of a dense vector, choosing the cheaper
    /// index representation analytically.
    pub fn sparse_from_dense(dense: &[f32]) -> Payload {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                indices.push(i as u64);
                values.push(v);
            }
        }
        let mode = choose_index_mode(dense.len() as u64, indices.len() as u64);
        Payload::Sparse {
            len: dense.len() as u64,
            indices,
            values,
            mode,
        }
    }

    /// Fraction of zero entries in the logical vector this payload encodes.
    pub fn sparsity(&self) -> f64 {
        let n = self.param_count();
        if n == 0 {
            return 0.0;
        }
        let zeros = match self {
            Payload::Dense(v) => v.iter().filter(|&&x| x == 0.0).count() as u64,
            Payload::Sparse { len, values, .. } => {
                len - values.iter().filter(|&&x| x != 0.0).count() as u64
            }
            Payload::Quant(q) => q
                .layers
                .iter()
                .flat_map(|l| &l.codes)
                .filter(|&&c| c == 0)
                .count() as u64,
            Payload::Binary { .. } => 0,
        };
        zeros as f64 / n as f64
    }
}

/// Picks varint deltas or a bitmap for sparse indices by comparing the
/// bitmap's fixed cost against the varint cost at the mean gap; ties go to
/// varints.
pub fn choose_index_mode(len: u64, nnz: u64) -> IndexMode {
    if nnz == 0 {
        return IndexMode::Varint;
    }
    let mean_gap = (len / nnz).max(1);
    let varint_bytes = nnz * varint_len(mean_gap) as u64;
    let bitmap_bytes = len.div_ceil(8);
    if varint_bytes <= bitmap_bytes {
        IndexMode::Varint
    } else {
        IndexMode::Bitmap
    }
}

pub(crate) fn varint_len(x: u64) -> usize {
    let bits = (64 - x.leading_zeros()).max(1);
    bits.div_ceil(7) as usize
}

fn write_varint(buf: &mut Vec<u8>, mut x: u64) {
    loop {
        let byte = (x & 0x7f) as u8;
        x >>= 7;
        if x == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut x = 0u64;
    let mut shift = 0u32;
    loop {
        let &byte = bytes
            .get(*pos)
            .ok_or_else(|| Error::truncated("varint"))?;
        *pos += 1;
        if shift >= 64 || (shift == 63 && byte > 1) {
            return Err(Error::Corrupt("varint exceeds 64 bits".into()));
        }
        x |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(x);
        }
        shift += 7;
    }
}

/// Raw DEFLATE at the fixed envelope level. Falls back to stored blocks when
/// Huffman coding would expand the data, so the envelope never costs more
/// than 5 bytes per 64 KiB plus change over the raw payload.
pub fn deflate_bytes(data: &[u8]) -> Vec<u8> {
    let compressed = miniz_oxide::deflate::compress_to_vec(data, DEFLATE_LEVEL);
    if data.is_empty() {
        return compressed;
    }
    let stored_len = data.len() + data.len().div_ceil(65_535) * 5;
    if compressed.len() <= stored_len {
        return compressed;
    }
    let mut out = Vec::with_capacity(stored_len);
    let mut chunks = data.chunks(65_535).peekable();
    while let Some(chunk) = chunks.next() {
        // Stored block: BFINAL in bit 0, BTYPE 00, pad to the byte boundary,
        // then LEN and its complement, then the bytes verbatim.
        out.push(if chunks.peek().is_none() { 1 } else { 0 });
        out.extend_from_slice(&(chunk.len() as u16).to_le_bytes());
        out.extend_from_slice(&(!(chunk.len() as u16)).to_le_bytes());
        out.extend_from_slice(chunk);
    }
    out
}

/// Inverse of [`deflate_bytes`], capped so corrupt input cannot balloon.
pub fn inflate_bytes(data: &[u8]) -> Result<Vec<u8>> {
    miniz_oxide::inflate::decompress_to_vec_with_limit(data, MAX_INFLATED)
        .map_err(|e| Error::Corrupt(format!("deflate stream: {e}")))
}

fn encode_payload(payload: &Payload) -> Result<Vec<u8>> {
    match payload {
        Payload::Dense(values) => {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            Ok(buf)
        }
        Payload::Sparse {
            len,
            indices,
            values,
            mode,
        } => {
            if indices.len() != values.len() {
                return Err(Error::Encode(format!(
                    "{} indices but {} values",
                    indices.len(),
                    values.len()
                )));
            }
            if indices.len() as u64 > *len {
                return Err(Error::Encode("more nonzeros than vector entries".into()));
            }
            for w in indices.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Encode(format!(
                        "indices not strictly increasing at {} -> {}",
                        w[0], w[1]
                    )));
                }
            }
            if let Some(&last) = indices.last() {
                if last >= *len {
                    return Err(Error::Encode(format!(
                        "index {last} out of range for length {len}"
                    )));
                }
            }
            let mut buf = Vec::new();
            buf.extend_from_slice(&(indices.len() as u64).to_le_bytes());
            match mode {
                IndexMode::Varint => {
                    let mut prev = 0u64;
                    for (j, &idx) in indices.iter().enumerate() {
                        let delta = if j == 0 { idx } else { idx - prev };
                        write_varint(&mut buf, delta);
                        prev = idx;
                    }
                }
                IndexMode::Bitmap => {
                    let mut bitmap = vec![0u8; (*len as usize).div_ceil(8)];
                    for &idx in indices {
                        bitmap[(idx / 8) as usize] |= 0x80 >> (idx % 8);
                    }
                    buf.extend_from_slice(&bitmap);
                }
            }
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            Ok(buf)
        }
        Payload::Quant(q) => {
            let q_max = qmax(q.bits)? as i32;
            if q.layers.len() > u16::MAX as usize {
                return Err(Error::Encode(format!("{} layers", q.layers.len())));
            }
            let mut buf = vec![q.bits];
            buf.extend_from_slice(&(q.layers.len() as u16).to_le_bytes());
            for layer in &q.layers {
                if layer.codes.len() > u32::MAX as usize {
                    return Err(Error::Encode("layer too large".into()));
                }
                if let Some(&bad) = layer
                    .codes
                    .iter()
                    .find(|&&c| (c as i32).abs() > q_max)
                {
                    return Err(Error::Encode(format!(
                        "code {bad} out of range for {} bits",
                        q.bits
                    )));
                }
                buf.extend_from_slice(&(layer.codes.len() as u32).to_le_bytes());
                buf.push(layer.scale_exp as u8);
                match q.bits {
                    8 => buf.extend(layer.codes.iter().map(|&c| c as u8)),
                    4 => {
                        for pair in layer.codes.chunks(2) {
                            let lo = (pair[0] as u8) & 0x0f;
                            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                            buf.push(lo | (hi << 4));
                        }
                    }
                    _ => unreachable!("qmax validated bits"),
                }
            }
            Ok(buf)
        }
        Payload::Binary { signs } => {
            if let Some(&bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
                return Err(Error::Encode(format!("sign {bad} is not +1 or -1")));
            }
            let mut buf = vec![0u8; signs.len().div_ceil(8)];
            for (i, &s) in signs.iter().enumerate() {
                if s == 1 {
                    buf[i / 8] |= 0x80 >> (i % 8);
                }
            }
            Ok(buf)
        }
    }
}

/// Serializes a message. `compress` wraps the payload in the DEFLATE
/// envelope and sets the corresponding header flag.
pub fn encode_message(
    direction: Direction,
    round: u32,
    sender_id: u32,
    payload: &Payload,
    compress: bool,
) -> Result<Vec<u8>> {
    let body = encode_payload(payload)?;
    let body = if compress { deflate_bytes(&body) } else { body };
    let mut flags = 0u8;
    if compress {
        flags |= FLAG_DEFLATED;
    }
    if let Payload::Sparse {
        mode: IndexMode::Bitmap,
        ..
    } = payload
    {
        flags |= FLAG_BITMAP;
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + body.len());
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(direction as u8);
    buf.push(payload.kind() as u8);
    buf.push(flags);
    buf.extend_from_slice(&round.to_le_bytes());
    buf.extend_from_slice(&sender_id.to_le_bytes());
    buf.extend_from_slice(&payload.param_count().to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&body);
    Ok(buf)
}

/// Size of the uncompressed payload body for a message, without building the
/// envelope. Matches `encode_payload(..).len()` exactly.
pub fn payload_raw_len(payload: &Payload) -> u64 {
    match payload {
        Payload::Dense(v) => 4 * v.len() as u64,
        Payload::Sparse {
            len,
            indices,
            mode,
            values,
        } => {
            let idx_bytes: u64 = match mode {
                IndexMode::Varint => {
                    let mut prev = 0u64;
                    indices
                        .iter()
                        .enumerate()
                        .map(|(j, &idx)| {
                            let d = if j == 0 { idx } else { idx - prev };
                            prev = idx;
                            varint_len(d) as u64
                        })
                        .sum()
                }
                IndexMode::Bitmap => len.div_ceil(8),
            };
            8 + idx_bytes + 4 * values.len() as u64
        }
        Payload::Quant(q) => {
            let per_layer: u64 = q
                .layers
                .iter()
                .map(|l| 5 + (l.codes.len() as u64 * q.bits as u64).div_ceil(8))
                .sum();
            3 + per_layer
        }
        Payload::Binary { signs } => (signs.len() as u64).div_ceil(8),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::truncated("header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version(format!(
            "message version {}, this build speaks {VERSION}",
            bytes[4]
        )));
    }
    let direction = match bytes[5] {
        0 => Direction::ServerToClient,
        1 => Direction::ClientToServer,
        d => return Err(Error::Format(format!("direction byte {d}"))),
    };
    let kind = match bytes[6] {
        0 => PayloadKind::DenseF32,
        1 => PayloadKind::SparseF32,
        2 => PayloadKind::QuantInt,
        3 => PayloadKind::Binary,
        k => return Err(Error::Version(format!("payload kind {k}"))),
    };
    let flags = bytes[7];
    if flags & !(FLAG_DEFLATED | FLAG_BITMAP) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    if flags & FLAG_BITMAP != 0 && kind != PayloadKind::SparseF32 {
        return Err(Error::Format(
            "bitmap flag on a non-sparse payload".into(),
        ));
    }
    let round = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let sender_id = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let param_count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bytes[24] != 0 || bytes[25] != 0 {
        return Err(Error::Format("reserved bytes not zero".into()));
    }
    Ok(Header {
        direction,
        kind,
        round,
        sender_id,
        param_count,
        compressed: flags & FLAG_DEFLATED != 0,
        index_mode: if flags & FLAG_BITMAP != 0 {
            IndexMode::Bitmap
        } else {
            IndexMode::Varint
        },
    })
}

fn parse_payload(header: &Header, body: &[u8]) -> Result<Payload> {
    let n = header.param_count;
    let mut pos: usize;
    let payload = match header.kind {
        PayloadKind::DenseF32 => {
            let need = (n as usize)
                .checked_mul(4)
                .ok_or_else(|| Error::Format("parameter count overflows".into()))?;
            if body.len() < need {
                return Err(Error::truncated("dense values"));
            }
            let values = body[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = need;
            Payload::Dense(values)
        }
        PayloadKind::SparseF32 => {
            if body.len() < 8 {
                return Err(Error::truncated("nonzero count"));
            }
            let nnz = u64::from_le_bytes(body[..8].try_into().unwrap());
            pos = 8;
            if nnz > n {
                return Err(Error::Corrupt(format!(
                    "{nnz} nonzeros in a length-{n} vector"
                )));
            }
            let nnz = nnz as usize;
            let mut indices = Vec::with_capacity(nnz);
            match header.index_mode {
                IndexMode::Varint => {
                    let mut prev = 0u64;
                    for j in 0..nnz {
                        let delta = read_varint(body, &mut pos)?;
                        let idx = if j == 0 {
                            delta
                        } else {
                            if delta == 0 {
                                return Err(Error::Corrupt(
                                    "sparse indices not strictly increasing".into(),
                                ));
                            }
                            prev.checked_add(delta).ok_or_else(|| {
                                Error::Corrupt("sparse index overflows".into())
                            })?
                        };
                        if idx >= n {
                            return Err(Error::Corrupt(format!(
                                "sparse index {idx} out of range for length {n}"
                            )));
                        }
                        indices.push(idx);
                        prev = idx;
                    }
                }
                IndexMode::Bitmap => {
                    let bm_len = (n as usize).div_ceil(8);
                    if body.len() < pos + bm_len {
                        return Err(Error::truncated("index bitmap"));
                    }
                    let bitmap = &body[pos..pos + bm_len];
                    pos += bm_len;
                    for (byte_i, &b) in bitmap.iter().enumerate() {
                        for bit in 0..8 {
                            if b & (0x80 >> bit) != 0 {
                                let idx = (byte_i * 8 + bit) as u64;
                                if idx >= n {
                                    return Err(Error::Corrupt(
                                        "bitmap padding bits not zero".into(),
                                    ));
                                }
                                indices.push(idx);
                            }
                        }
                    }
                    if indices.len() != nnz {
                        return Err(Error::Corrupt(format!(
                            "bitmap has {} set bits, payload declares {nnz}",
                            indices.len()
                        )));
                    }
                }
            }
            if body.len() < pos + nnz * 4 {
                return Err(Error::truncated("sparse values"));
            }
            let values = body[pos..pos + nnz * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += nnz * 4;
            Payload::Sparse {
                len: n,
                indices,
                values,
                mode: header.index_mode,
            }
        }
        PayloadKind::QuantInt => {
            if body.len() < 3 {
                return Err(Error::truncated("quantization header"));
            }
            let bits = body[0];
            if bits != 4 && bits != 8 {
                return Err(Error::Format(format!("quantization width {bits}")));
            }
            let q_max = qmax(bits)? as i32;
            let layer_count = u16::from_le_bytes(body[1..3].try_into().unwrap()) as usize;
            pos = 3;
            let mut layers = Vec::with_capacity(layer_count);
            let mut total = 0u64;
            for _ in 0..layer_count {
                if body.len() < pos + 5 {
                    return Err(Error::truncated("layer header"));
                }
                let len = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize;
                let scale_exp = body[pos + 4] as i8;
                pos += 5;
                total += len as u64;
                let codes: Vec<i8> = match bits {
                    8 => {
                        if body.len() < pos + len {
                            return Err(Error::truncated("codes"));
                        }
                        let codes = body[pos..pos + len].iter().map(|&b| b as i8).collect();
                        pos += len;
                        codes
                    }
                    _ => {
                        let nbytes = len.div_ceil(2);
                        if body.len() < pos + nbytes {
                            return Err(Error::truncated("codes"));
                        }
                        let mut codes = Vec::with_capacity(len);
                        for (k, &b) in body[pos..pos + nbytes].iter().enumerate() {
                            codes.push(((b << 4) as i8) >> 4);
                            if 2 * k + 1 < len {
                                codes.push((b as i8) >> 4);
                            } else if b >> 4 != 0 {
                                return Err(Error::Corrupt(
                                    "nibble padding not zero".into(),
                                ));
                            }
                        }
                        pos += nbytes;
                        codes
                    }
                };
                if let Some(&bad) = codes.iter().find(|&&c| (c as i32).abs() > q_max) {
                    return Err(Error::Corrupt(format!(
                        "code {bad} out of range for {bits} bits"
                    )));
                }
                layers.push(QuantLayer { scale_exp, codes });
            }
            if total != n {
                return Err(Error::Corrupt(format!(
                    "layers hold {total} codes, header declares {n}"
                )));
            }
            Payload::Quant(QuantizedModel { bits, layers })
        }
        PayloadKind::Binary => {
            let nbytes = (n as usize).div_ceil(8);
            if body.len() < nbytes {
                return Err(Error::truncated("sign bitmap"));
            }
            let mut signs = Vec::with_capacity(n as usize);
            for (byte_i, &b) in body[..nbytes].iter().enumerate() {
                for bit in 0..8 {
                    let idx = byte_i * 8 + bit;
                    let set = b & (0x80 >> bit) != 0;
                    if idx < n as usize {
                        signs.push(if set { 1 } else { -1 });
                    } else if set {
                        return Err(Error::Corrupt("sign padding bits not zero".into()));
                    }
                }
            }
            pos = nbytes;
            Payload::Binary { signs }
        }
    };
    if pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            body.len() - pos
        )));
    }
    Ok(payload)
}

/// Parses a full message, undoing the DEFLATE envelope if present. Strict:
/// bad magic or structure is a format error, a foreign version or payload
/// kind is a version error, declared-versus-actual mismatches are corruption,
/// and running out of bytes is an I/O error.
pub fn decode_message(bytes: &[u8]) -> Result<(Header, Payload)> {
    let header = parse_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    let payload = if header.compressed {
        let inflated = inflate_bytes(body)?;
        parse_payload(&header, &inflated)?
    } else {
        parse_payload(&header, body)?
    };
    Ok((header, payload))
}

/// Label for one compression arm in size tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeKind {
    Dense,
    Sparse,
    Quant(u8),
    Binary,
}

impl fmt::Display for SizeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeKind::Dense => f.write_str("dense_f32"),
            SizeKind::Sparse => f.write_str("sparse_f32"),
            SizeKind::Quant(b) => write!(f, "quant_int{b}"),
            SizeKind::Binary => f.write_str("binary"),
        }
    }
}

/// Analytic payload size in bytes, before any envelope and excluding the
/// header: the cost of the values themselves. Dense vectors cost 4 bytes a
/// parameter, integer codes `bits/8` of a byte each, signs a bit each; a
/// sparse vector pays 8 bytes up front, its index structure, and 4 bytes per
/// survivor. An empty model costs nothing.
pub fn estimate_size(kind: SizeKind, param_count: u64, nonzeros: u64) -> u64 {
    if param_count == 0 {
        return 0;
    }
    match kind {
        SizeKind::Dense => 4 * param_count,
        SizeKind::Quant(bits) => (param_count * bits as u64).div_ceil(8),
        SizeKind::Binary => param_count.div_ceil(8),
        SizeKind::Sparse => {
            let nnz = nonzeros.min(param_count);
            let idx = if nnz == 0 {
                0
            } else {
                let mean_gap = (param_count / nnz).max(1);
                let varint = nnz * varint_len(mean_gap) as u64;
                let bitmap = param_count.div_ceil(8);
                varint.min(bitmap)
            };
            8 + idx + 4 * nnz
        }
    }
}

/// Measured sizes for one payload: actual encoded bytes, raw and deflated,
/// header included.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub kind: SizeKind,
    pub header_bytes: u64,
    pub raw_bytes: u64,
    pub deflated_bytes: u64,
    pub sparsity: f64,
}

/// Encodes the payload twice, with and without the envelope, and reports
/// what each form costs on the wire.
pub fn measure_payload(kind: SizeKind, payload: &Payload) -> Result<SizeReport> {
    let raw = encode_message(Direction::ServerToClient, 0, 0, payload, false)?;
    let deflated = encode_message(Direction::ServerToClient, 0, 0, payload, true)?;
    Ok(SizeReport {
        kind,
        header_bytes: HEADER_LEN as u64,
        raw_bytes: raw.len() as u64,
        deflated_bytes: deflated.len() as u64,
        sparsity: payload.sparsity(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rt(payload: &Payload, compress: bool) -> (Header, Payload) {
        let bytes =
            encode_message(Direction::ClientToServer, 7, 3, payload, compress).unwrap();
        decode_message(&bytes).unwrap()
    }

    #[test]
    fn header_layout_is_byte_exact() {
        let bytes =
            encode_message(Direction::ServerToClient, 0x01020304, 9, &Payload::Dense(vec![]), false)
                .unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[0..4], b"FSQZ");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &[0x04, 0x03, 0x02, 0x01]);
        assert_eq!(&bytes[12..16], &[9, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[0; 8]);
        assert_eq!(&bytes[24..26], &[0, 0]);
    }

    #[test]
    fn dense_round_trip_preserves_bits() {
        let values = vec![1.5f32, -0.0, f32::NAN, 3.4e38, 1e-42];
        let (header, back) = rt(&Payload::Dense(values.clone()), false);
        assert_eq!(header.param_count, 5);
        match back {
            Payload::Dense(v) => {
                let a: Vec<u32> = values.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
            other => panic!("wrong payload {other:?}"),
        }
    }

    #[test]
    fn sparse_wire_bytes_match_hand_encoding() {
        let payload = Payload::Sparse {
            len: 10,
            indices: vec![2, 3, 9],
            values: vec![1.0, 2.0, 3.0],
            mode: IndexMode::Varint,
        };
        let bytes = encode_message(Direction::ClientToServer, 0, 0, &payload, false).unwrap();
        let body = &bytes[HEADER_LEN..];
        // nnz = 3, deltas 2, 1, 6, then three f32 values.
        assert_eq!(&body[..8], &3u64.to_le_bytes());
        assert_eq!(&body[8..11], &[2, 1, 6]);
        assert_eq!(&body[11..15], &1.0f32.to_le_bytes());
        assert_eq!(body.len(), 8 + 3 + 12);
        assert_eq!(payload_raw_len(&payload), body.len() as u64);
        let (_, back) = decode_message(&bytes).unwrap();
        assert_eq!(back, payload);
    }

    #[test]
    fn sparse_bitmap_mode_round_trips() {
        let payload = Payload::Sparse {
            len: 12,
            indices: vec![0, 8, 11],
            values: vec![-1.0, 0.5, 9.0],
            mode: IndexMode::Bitmap,
        };
        let bytes = encode_message(Direction::ClientToServer, 1, 2, &payload, false).unwrap();
        let body = &bytes[HEADER_LEN..];
        // Bitmap of 12 entries = 2 bytes: bits 0, 8, 11 set, MSB first.
        assert_eq!(&body[8..10], &[0b1000_0000, 0b1001_0000]);
        let (header, back) = decode_message(&bytes).unwrap();
        assert_eq!(header.index_mode, IndexMode::Bitmap);
        assert_eq!(back, payload);
    }

    #[test]
    fn index_mode_crossover_is_analytic() {
        // Dense-ish vector: bitmap wins; very sparse vector: varints win.
        assert_eq!(choose_index_mode(80_000, 40_000), IndexMode::Bitmap);
        assert_eq!(choose_index_mode(80_000, 100), IndexMode::Varint);
        assert_eq!(choose_index_mode(10, 0), IndexMode::Varint);
        // At 1 varint byte per nonzero the tie at len = 8 * nnz goes varint.
        assert_eq!(choose_index_mode(800, 100), IndexMode::Varint);
    }

    #[test]
    fn quant_nibble_packing_round_trips() {
        for len in [1usize, 2, 5, 8] {
            let codes: Vec<i8> = (0..len).map(|i| ((i as i8) % 15) - 7).collect();
            let q = QuantizedModel {
                bits: 4,
                layers: vec![QuantLayer {
                    scale_exp: -3,
                    codes,
                }],
            };
            let payload = Payload::Quant(q);
            let (_, back) = rt(&payload, false);
            assert_eq!(back, payload);
        }
    }

    #[test]
    fn quant_eight_bit_round_trips_across_layers() {
        let q = QuantizedModel {
            bits: 8,
            layers: vec![
                QuantLayer {
                    scale_exp: -7,
                    codes: vec![64, -127, 0],
                },
                QuantLayer {
                    scale_exp: 2,
                    codes: vec![1, -1],
                },
            ],
        };
        let payload = Payload::Quant(q);
        let (header, back) = rt(&payload, true);
        assert_eq!(header.param_count, 5);
        assert!(header.compressed);
        assert_eq!(back, payload);
    }

    #[test]
    fn binary_bitmap_round_trips_and_pads_with_zeros() {
        let signs = vec![1i8, -1, -1, 1, 1, 1, -1, 1, 1, -1];
        let payload = Payload::Binary {
            signs: signs.clone(),
        };
        let bytes = encode_message(Direction::ClientToServer, 0, 1, &payload, false).unwrap();
        let body = &bytes[HEADER_LEN..];
        assert_eq!(body, &[0b1001_1101, 0b1000_0000]);
        let (_, back) = decode_message(&bytes).unwrap();
        assert_eq!(back, payload);
    }

    #[test]
    fn decode_rejects_malformed_messages() {
        let good =
            encode_message(Direction::ClientToServer, 1, 2, &Payload::Dense(vec![1.0]), false)
                .unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_message(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_message(&bad_version),
            Err(Error::Version(_))
        ));

        let mut bad_kind = good.clone();
        bad_kind[6] = 9;
        assert!(matches!(decode_message(&bad_kind), Err(Error::Version(_))));

        let mut bad_flags = good.clone();
        bad_flags[7] = 0b100;
        assert!(matches!(decode_message(&bad_flags), Err(Error::Format(_))));

        let mut bitmap_on_dense = good.clone();
        bitmap_on_dense[7] = FLAG_BITMAP;
        assert!(matches!(
            decode_message(&bitmap_on_dense),
            Err(Error::Format(_))
        ));

        let mut bad_reserved = good.clone();
        bad_reserved[25] = 1;
        assert!(matches!(
            decode_message(&bad_reserved),
            Err(Error::Format(_))
        ));

        assert!(matches!(
            decode_message(&good[..HEADER_LEN - 1]),
            Err(Error::Io(_))
        ));
        assert!(matches!(
            decode_message(&good[..good.len() - 1]),
            Err(Error::Io(_))
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_message(&trailing), Err(Error::Format(_))));
    }

    #[test]
    fn decode_rejects_structural_corruption() {
        // Non-monotone sparse indices (zero delta after the first).
        let sparse = Payload::Sparse {
            len: 10,
            indices: vec![1, 2],
            values: vec![1.0, 2.0],
            mode: IndexMode::Varint,
        };
        let mut bytes =
            encode_message(Direction::ClientToServer, 0, 0, &sparse, false).unwrap();
        bytes[HEADER_LEN + 9] = 0;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));

        // Bitmap set-bit count disagreeing with the declared nonzero count.
        let bm = Payload::Sparse {
            len: 9,
            indices: vec![0, 3],
            values: vec![1.0, 2.0],
            mode: IndexMode::Bitmap,
        };
        let mut bytes = encode_message(Direction::ClientToServer, 0, 0, &bm, false).unwrap();
        bytes[HEADER_LEN + 8] |= 0b0100_0000;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));

        // Binary padding bit set beyond the parameter count.
        let bin = Payload::Binary {
            signs: vec![1, -1, 1],
        };
        let mut bytes = encode_message(Direction::ClientToServer, 0, 0, &bin, false).unwrap();
        bytes[HEADER_LEN] |= 0b0001_0000;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));

        // 4-bit quant padding nibble set.
        let q = Payload::Quant(QuantizedModel {
            bits: 4,
            layers: vec![QuantLayer {
                scale_exp: 0,
                codes: vec![3],
            }],
        });
        let mut bytes = encode_message(Direction::ClientToServer, 0, 0, &q, false).unwrap();
        *bytes.last_mut().unwrap() |= 0xf0;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));

        // 8-bit code -128 is outside the symmetric range.
        let q8 = Payload::Quant(QuantizedModel {
            bits: 8,
            layers: vec![QuantLayer {
                scale_exp: 0,
                codes: vec![1],
            }],
        });
        let mut bytes = encode_message(Direction::ClientToServer, 0, 0, &q8, false).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 0x80;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));

        // Corrupt DEFLATE stream: the reserved block type 11 must be refused,
        // and so must a stream cut off mid-block.
        let dense = Payload::Dense(vec![0.0; 64]);
        let mut bytes = encode_message(Direction::ClientToServer, 0, 0, &dense, true).unwrap();
        bytes[HEADER_LEN] = 0xff;
        assert!(matches!(decode_message(&bytes), Err(Error::Corrupt(_))));
        let bytes = encode_message(Direction::ClientToServer, 0, 0, &dense, true).unwrap();
        assert!(matches!(
            decode_message(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn encode_rejects_invalid_payloads() {
        let unsorted = Payload::Sparse {
            len: 10,
            indices: vec![3, 3],
            values: vec![1.0, 2.0],
            mode: IndexMode::Varint,
        };
        assert!(matches!(
            encode_message(Direction::ClientToServer, 0, 0, &unsorted, false),
            Err(Error::Encode(_))
        ));
        let out_of_range = Payload::Sparse {
            len: 3,
            indices: vec![3],
            values: vec![1.0],
            mode: IndexMode::Varint,
        };
        assert!(matches!(
            encode_message(Direction::ClientToServer, 0, 0, &out_of_range, false),
            Err(Error::Encode(_))
        ));
        let bad_sign = Payload::Binary { signs: vec![0] };
        assert!(matches!(
            encode_message(Direction::ClientToServer, 0, 0, &bad_sign, false),
            Err(Error::Encode(_))
        ));
        let big_code = Payload::Quant(QuantizedModel {
            bits: 4,
            layers: vec![QuantLayer {
                scale_exp: 0,
                codes: vec![8],
            }],
        });
        assert!(matches!(
            encode_message(Direction::ClientToServer, 0, 0, &big_code, false),
            Err(Error::Encode(_))
        ));
    }

    #[test]
    fn estimates_match_formulas() {
        assert_eq!(estimate_size(SizeKind::Dense, 780_000, 0), 3_120_000);
        assert_eq!(estimate_size(SizeKind::Quant(8), 780_000, 0), 780_000);
        assert_eq!(estimate_size(SizeKind::Quant(4), 780_000, 0), 390_000);
        assert_eq!(estimate_size(SizeKind::Binary, 780_000, 0), 97_500);
        for kind in [
            SizeKind::Dense,
            SizeKind::Quant(8),
            SizeKind::Quant(4),
            SizeKind::Binary,
            SizeKind::Sparse,
        ] {
            assert_eq!(estimate_size(kind, 0, 0), 0);
        }
    }

    #[test]
    fn estimates_are_exact_for_fixed_width_kinds() {
        let dense = Payload::Dense(vec![0.25; 1000]);
        assert_eq!(
            payload_raw_len(&dense),
            estimate_size(SizeKind::Dense, 1000, 0)
        );
        let signs = Payload::Binary {
            signs: vec![1; 1000],
        };
        assert_eq!(
            payload_raw_len(&signs),
            estimate_size(SizeKind::Binary, 1000, 0)
        );
        // Integer codes: the estimate covers the codes alone; the wire adds
        // 3 bytes of framing plus 5 per layer.
        let q = QuantizedModel {
            bits: 4,
            layers: vec![QuantLayer {
                scale_exp: -2,
                codes: vec![1; 1000],
            }],
        };
        assert_eq!(
            payload_raw_len(&Payload::Quant(q)),
            estimate_size(SizeKind::Quant(4), 1000, 0) + 3 + 5
        );
    }

    #[test]
    fn deflate_envelope_respects_stored_block_bound() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut data = vec![0u8; 300_000];
        rng.fill_bytes(&mut data);
        let out = deflate_bytes(&data);
        let bound = data.len() as u64 + (data.len() as u64).div_ceil(65_535) * 5 + 11;
        assert!((out.len() as u64) <= bound, "{} > {bound}", out.len());
        assert_eq!(inflate_bytes(&out).unwrap(), data);
    }

    #[test]
    fn payload_raw_len_matches_encoding() {
        let payloads = vec![
            Payload::Dense(vec![1.0, 2.0, 3.0]),
            Payload::sparse_from_dense(&[0.0, 1.0, 0.0, 0.0, -2.0]),
            Payload::Sparse {
                len: 100,
                indices: vec![0, 50, 99],
                values: vec![1.0, 2.0, 3.0],
                mode: IndexMode::Bitmap,
            },
            Payload::Quant(QuantizedModel {
                bits: 4,
                layers: vec![QuantLayer {
                    scale_exp: 1,
                    codes: vec![1, -1, 7],
                }],
            }),
            Payload::Binary {
                signs: vec![1, -1, 1, 1, -1, 1, 1, 1, -1],
            },
        ];
        for p in &payloads {
            let msg = encode_message(Direction::ServerToClient, 0, 0, p, false).unwrap();
            assert_eq!(
                payload_raw_len(p),
                (msg.len() - HEADER_LEN) as u64,
                "{:?}",
                p.kind()
            );
        }
    }

    #[test]
    fn sparsity_reflects_zero_fraction() {
        assert_eq!(Payload::Dense(vec![0.0, 1.0, 0.0, 0.0]).sparsity(), 0.75);
        assert_eq!(Payload::sparse_from_dense(&[0.0, 1.0]).sparsity(), 0.5);
        assert_eq!(Payload::Dense(vec![]).sparsity(), 0.0);
        assert_eq!(
            Payload::Binary {
                signs: vec![1, -1]
            }
            .sparsity(),
            0.0
        );
    }
}
