//! Minimal RIFF/WAVE reader and writer for 16-bit mono PCM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::audio::Waveform;
use crate::error::{Result, SqpError};

const SCALE: f32 = 1.0 / 32768.0;

fn bad(msg: impl Into<String>) -> SqpError {
    SqpError::Format(msg.into())
}

fn read_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| bad("truncated WAV header"))
}

fn read_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| bad("truncated WAV header"))
}

/// Load a RIFF/WAVE file. Only PCM, 16-bit, mono is accepted.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad(format!(
                "chunk {:?} claims {size} bytes past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                fmt = Some((
                    read_u16(&bytes, body)?,
                    read_u16(&bytes, body + 2)?,
                    read_u32(&bytes, body + 4)?,
                    read_u16(&bytes, body + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if format != 1 {
        return Err(bad(format!("unsupported WAV format tag {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(bad(format!("{channels} channels, want mono")));
    }
    if bits != 16 {
        return Err(bad(format!("{bits} bits per sample, want 16")));
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad("data chunk has an odd byte count"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 * SCALE)
        .collect();
    Waveform::new(samples, rate)
}

/// Write a waveform as 16-bit mono PCM. Samples are clamped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &w.samples {
        let v = (s * 32768.0).clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_wav(&p, &Waveform::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.sample_rate_hz, 16_000);
        assert_eq!(w.samples.len(), 16_000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("square.wav");
        // Hand-build a file holding i16::MAX / i16::MIN alternating.
        let w = Waveform::new(
            vec![32767.0 * SCALE, -1.0, 32767.0 * SCALE, -1.0],
            16_000,
        )
        .unwrap();
        write_wav(&p, &w).unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.samples[0], 32767.0 / 32768.0);
        assert_eq!(r.samples[1], -1.0);
    }

    #[test]
    fn round_trip_payload_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.wav");
        let p2 = dir.path().join("b.wav");
        let mut rng = Rng::seed_from_u64(21);
        let samples: Vec<f32> = (0..5000)
            .map(|_| (rng.next_u64() as i64 as i16) as f32 * SCALE)
            .collect();
        write_wav(&p1, &Waveform::new(samples, 16_000).unwrap()).unwrap();
        let loaded = load_wav(&p1).unwrap();
        write_wav(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"RIFFxxxxWAVO").unwrap();
        assert!(load_wav(&p).is_err());
        std::fs::write(&p, b"not a wav at all").unwrap();
        assert!(load_wav(&p).is_err());

        // Stereo gets refused.
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&36u32.to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes()); // channels = 2
        out.extend_from_slice(&16_000u32.to_le_bytes());
        out.extend_from_slice(&64_000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, &out).unwrap();
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }
}
