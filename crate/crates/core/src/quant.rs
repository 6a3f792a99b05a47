//! W4A8: symmetric INT4 weights with per-output-channel scales, symmetric INT8
//! activations with one per-tensor scale, and a GEMV split into fixed-width input
//! chunks whose INT32 partials are summed with [`em_add`](crate::sfu::em_add).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fxp::Fxp32;
use crate::sfu::{self, Precision, Tensor};

pub const INT4_MAX: i8 = 7;
pub const INT8_MAX: i8 = 127;

/// Packed INT4 matrix, row-major, two codes per byte with the even column in the low
/// nibble.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedMatrix {
    out_dim: usize,
    in_dim: usize,
    packed: Vec<u8>,
    scales: Vec<Fxp32>,
}

#[inline]
fn sign_extend_nibble(n: u8) -> i8 {
    ((n << 4) as i8) >> 4
}

impl QuantizedMatrix {
    /// Builds from unpacked codes in `[-7, 7]`, row-major.
    pub fn from_codes(out_dim: usize, in_dim: usize, codes: &[i8], scales: Vec<Fxp32>) -> Result<Self> {
        if in_dim == 0 || in_dim % 2 != 0 {
            return Err(Error::Config(format!("in_dim {in_dim} must be even and positive")));
        }
        if codes.len() != out_dim * in_dim {
            return Err(Error::ShapeMismatch {
                what: "weight codes",
                expected: out_dim * in_dim,
                got: codes.len(),
            });
        }
        if scales.len() != out_dim {
            return Err(Error::ShapeMismatch {
                what: "weight scales",
                expected: out_dim,
                got: scales.len(),
            });
        }
        if let Some(c) = codes.iter().find(|c| c.abs() > INT4_MAX) {
            return Err(Error::Config(format!("weight code {c} outside [-7, 7]")));
        }
        let packed = codes
            .chunks_exact(2)
            .map(|p| (p[0] as u8 & 0x0f) | ((p[1] as u8 & 0x0f) << 4))
            .collect();
        Ok(QuantizedMatrix {
            out_dim,
            in_dim,
            packed,
            scales,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Result<Self> {
        QuantizedMatrix::from_codes(out_dim, in_dim, &vec![0; out_dim * in_dim], vec![Fxp32::ONE; out_dim])
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn scales(&self) -> &[Fxp32] {
        &self.scales
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Storage in bytes: packed nibbles plus one 32-bit scale per row.
    pub fn byte_size(&self) -> usize {
        self.packed.len() + 4 * self.scales.len()
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> i8 {
        let idx = row * self.in_dim + col;
        let byte = self.packed[idx / 2];
        sign_extend_nibble(if idx % 2 == 0 { byte & 0x0f } else { byte >> 4 })
    }

    pub fn row_codes(&self, row: usize) -> Vec<i8> {
        let bytes = &self.packed[row * self.in_dim / 2..(row + 1) * self.in_dim / 2];
        bytes
            .iter()
            .flat_map(|&b| [sign_extend_nibble(b & 0x0f), sign_extend_nibble(b >> 4)])
            .collect()
    }

    /// Real-valued weights `code * scale`.
    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.out_dim)
            .flat_map(|r| {
                let s = self.scales[r].to_real();
                self.row_codes(r).into_iter().map(move |c| c as f64 * s)
            })
            .collect()
    }

    /// Keeps the rows listed in `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> QuantizedMatrix {
        let codes: Vec<i8> = rows.iter().flat_map(|&r| self.row_codes(r)).collect();
        let scales = rows.iter().map(|&r| self.scales[r]).collect();
        QuantizedMatrix::from_codes(rows.len(), self.in_dim, &codes, scales).expect("rows of a valid matrix")
    }

    const MAGIC: &'static [u8; 4] = b"SKVW";
    const VERSION: u32 = 1;

    /// Writes the SKVW format: magic, version, out_dim, in_dim (u32 LE), packed
    /// nibbles, then one raw little-endian Q15.17 scale per row.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        for v in [Self::VERSION, self.out_dim as u32, self.in_dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.packed)?;
        for s in &self.scales {
            w.write_all(&s.raw().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| format!("header: {e}"))?;
        if &header[..4] != Self::MAGIC {
            return Err("bad magic".into());
        }
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
        if word(1) != Self::VERSION {
            return Err(format!("unsupported version {}", word(1)));
        }
        let (out_dim, in_dim) = (word(2) as usize, word(3) as usize);
        if in_dim == 0 || in_dim % 2 != 0 {
            return Err(format!("in_dim {in_dim} must be even and positive"));
        }
        let mut packed = vec![0u8; out_dim * in_dim / 2];
        r.read_exact(&mut packed).map_err(|e| format!("weights: {e}"))?;
        let mut raw = vec![0u8; 4 * out_dim];
        r.read_exact(&mut raw).map_err(|e| format!("scales: {e}"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| e.to_string())?;
        if !rest.is_empty() {
            return Err(format!("{} trailing bytes", rest.len()));
        }
        if packed.iter().any(|&b| b & 0x0f == 8 || b >> 4 == 8) {
            return Err("weight code -8 is not allowed".into());
        }
        let scales = raw
            .chunks_exact(4)
            .map(|c| Fxp32::from_raw(i32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(QuantizedMatrix {
            out_dim,
            in_dim,
            packed,
            scales,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_to(&mut file).map_err(io)?;
        file.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        QuantizedMatrix::read_from(std::io::BufReader::new(file)).map_err(|reason| Error::Format {
            path: path.to_owned(),
            reason,
        })
    }
}

/// INT8 activation codes in `[-127, 127]` and their scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedActivation {
    pub codes: Vec<i8>,
    pub scale: Fxp32,
}

fn symmetric_scale(max_abs: f64, max_code: i8) -> Fxp32 {
    if max_abs == 0.0 {
        return Fxp32::ONE;
    }
    // a scale below one ulp cannot be represented; fall back to the smallest
    Fxp32::from_real_saturating(max_abs / max_code as f64).max(Fxp32::ULP)
}

fn quantize_row(row: &[f64], scale: Fxp32, max_code: i8) -> impl Iterator<Item = i8> + '_ {
    let s = scale.to_real();
    let m = max_code as f64;
    row.iter().map(move |&w| (w / s).round_ties_even().clamp(-m, m) as i8)
}

/// Per-output-channel symmetric INT4 quantization of a row-major matrix.
pub fn quantize_weights(w: &[f64], out_dim: usize, in_dim: usize) -> Result<QuantizedMatrix> {
    if w.len() != out_dim * in_dim {
        return Err(Error::ShapeMismatch {
            what: "weights",
            expected: out_dim * in_dim,
            got: w.len(),
        });
    }
    if let Some(x) = w.iter().find(|x| !x.is_finite()) {
        return Err(Error::OutOfRange { value: *x });
    }
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(out_dim);
    for row in w.chunks(in_dim.max(1)) {
        let max = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = symmetric_scale(max, INT4_MAX);
        codes.extend(quantize_row(row, scale, INT4_MAX));
        scales.push(scale);
    }
    QuantizedMatrix::from_codes(out_dim, in_dim, &codes, scales)
}

/// Per-tensor symmetric INT8 quantization of real values.
pub fn quantize_activation(x: &[f64]) -> Result<QuantizedActivation> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::OutOfRange { value: *v });
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = symmetric_scale(max, INT8_MAX);
    Ok(QuantizedActivation {
        codes: quantize_row(x, scale, INT8_MAX).collect(),
        scale,
    })
}

/// FXP32 -> INT8 through the SFU cast: codes `x * 127/max|x|`, scale `max|x|/127`.
pub fn quantize_activation_fxp(x: &[Fxp32]) -> Result<QuantizedActivation> {
    let max = x.iter().map(|v| v.abs()).max().unwrap_or(Fxp32::ZERO);
    if max == Fxp32::ZERO {
        return Ok(QuantizedActivation {
            codes: vec![0; x.len()],
            scale: Fxp32::ONE,
        });
    }
    let gain = sfu::int8_gain(max)?;
    let codes = sfu::cast(&Tensor::Fxp32(x.to_vec()), Precision::Int8, gain)?
        .into_int8()
        .expect("cast to int8");
    let scale = max.try_div(Fxp32::from_int(INT8_MAX as i16))?.max(Fxp32::ULP);
    Ok(QuantizedActivation { codes, scale })
}

/// INT8 x INT4 GEMV over `chunks` equal slices of the input. Each chunk yields one
/// INT32 partial vector; partials are summed with EM-Add.
pub fn gemv_chunked(w: &QuantizedMatrix, x: &QuantizedActivation, chunks: usize) -> Result<Vec<i32>> {
    if x.codes.len() != w.in_dim {
        return Err(Error::ShapeMismatch {
            what: "gemv input",
            expected: w.in_dim,
            got: x.codes.len(),
        });
    }
    if chunks == 0 || w.in_dim % chunks != 0 || (w.in_dim / chunks) % 2 != 0 {
        return Err(Error::NotDivisible {
            len: w.in_dim,
            parts: chunks,
        });
    }
    let width = w.in_dim / chunks;
    let row_bytes = w.in_dim / 2;
    let mut total = vec![0i32; w.out_dim];
    for c in 0..chunks {
        let xs = &x.codes[c * width..(c + 1) * width];
        let partial: Vec<i32> = (0..w.out_dim)
            .map(|r| {
                let start = r * row_bytes + c * width / 2;
                let bytes = &w.packed[start..start + width / 2];
                bytes
                    .iter()
                    .zip(xs.chunks_exact(2))
                    .map(|(&b, xp)| {
                        sign_extend_nibble(b & 0x0f) as i32 * xp[0] as i32
                            + sign_extend_nibble(b >> 4) as i32 * xp[1] as i32
                    })
                    .sum()
            })
            .collect();
        total = sfu::em_add(&total, &partial)?;
    }
    Ok(total)
}

/// `acc_c * w_scale_c * x_scale`, one rounding per multiply, via the SFU cast path.
pub fn dequantize_to_fxp(acc: &[i32], w_scales: &[Fxp32], x_scale: Fxp32) -> Result<Vec<Fxp32>> {
    if acc.len() != w_scales.len() {
        return Err(Error::ShapeMismatch {
            what: "weight scales",
            expected: acc.len(),
            got: w_scales.len(),
        });
    }
    let per_channel: Vec<Fxp32> = acc
        .iter()
        .zip(w_scales)
        .map(|(&a, &s)| {
            let t = sfu::cast(&Tensor::Int32(vec![a]), Precision::Fxp32, s)?;
            Ok(t.into_fxp32().expect("cast to fxp32")[0])
        })
        .collect::<Result<_>>()?;
    Ok(sfu::cast(&Tensor::Fxp32(per_channel), Precision::Fxp32, x_scale)?
        .into_fxp32()
        .expect("cast to fxp32"))
}

/// Quantized matrix-vector product returning Q15.17 values.
pub fn gemv_fxp(w: &QuantizedMatrix, x: &QuantizedActivation, chunks: usize) -> Result<Vec<Fxp32>> {
    let acc = gemv_chunked(w, x, chunks)?;
    dequantize_to_fxp(&acc, &w.scales, x.scale)
}
