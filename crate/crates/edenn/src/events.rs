//! Event streams: parsing, serialization, and quantization into binary event
//! volumes.
//!
//! Two interchange formats are supported:
//!
//! * CSV — optional header, one event per line `t_us,x,y,p` with `p` in
//!   `{1, -1}`.
//! * Binary — a 16-byte header (magic `EVT0`, u16 width, u16 height, 8
//!   reserved zero bytes) followed by little-endian 13-byte records
//!   (u64 t_us, u16 x, u16 y, i8 p).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT0";
const RECORD_LEN: usize = 13;

/// One sensor firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t_us: u64,
    /// Column index.
    pub x: u16,
    /// Row index.
    pub y: u16,
    /// +1 or -1.
    pub polarity: i8,
}

impl Event {
    /// Channel index in an event volume: 0 for positive, 1 for negative.
    pub fn channel(&self) -> usize {
        if self.polarity > 0 {
            0
        } else {
            1
        }
    }
}

/// Sensor geometry in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
}

/// Time window quantization: `bins() = window_us / bin_us` bins of equal
/// width starting at `t0_us`. The window is half-open: an event exactly at
/// `t0_us + window_us` falls outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub t0_us: u64,
    pub window_us: u64,
    pub bin_us: u64,
}

impl WindowSpec {
    pub fn new(t0_us: u64, window_us: u64, bin_us: u64) -> Result<WindowSpec> {
        if bin_us == 0 || window_us == 0 {
            return Err(Error::arg("window_spec", "durations must be positive"));
        }
        if !window_us.is_multiple_of(bin_us) {
            return Err(Error::arg(
                "window_spec",
                format!("window {window_us}us is not a multiple of bin {bin_us}us"),
            ));
        }
        Ok(WindowSpec {
            t0_us,
            window_us,
            bin_us,
        })
    }

    pub fn bins(&self) -> usize {
        (self.window_us / self.bin_us) as usize
    }

    /// Bin index for a timestamp, or None if outside the half-open window.
    pub fn bin_of(&self, t_us: u64) -> Option<usize> {
        if t_us < self.t0_us || t_us >= self.t0_us + self.window_us {
            return None;
        }
        Some(((t_us - self.t0_us) / self.bin_us) as usize)
    }
}

/// Binary indicator volume over (W, H, polarity channel, time bin).
#[derive(Debug, Clone, PartialEq)]
pub struct EventVolume {
    pub tensor: Tensor,
    pub spec: WindowSpec,
}

impl EventVolume {
    pub fn width(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.tensor.shape()[3]
    }

    /// The (W, H, 2) slice for one time bin.
    pub fn slice(&self, t: usize) -> Tensor {
        self.tensor.time_slice(t)
    }
}

/// Binary observation mask, (W, H) per slice or (W, H, T) per volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub tensor: Tensor,
}

impl Mask {
    pub fn from_tensor(tensor: Tensor) -> Result<Mask> {
        if tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("mask", "mask values must be 0 or 1"));
        }
        Ok(Mask { tensor })
    }

    pub fn ones(shape: &[usize]) -> Mask {
        Mask {
            tensor: Tensor::ones(shape),
        }
    }

    pub fn zeros(shape: &[usize]) -> Mask {
        Mask {
            tensor: Tensor::zeros(shape),
        }
    }

    /// The (W, H) slice for one time bin of a (W, H, T) mask.
    pub fn slice(&self, t: usize) -> Mask {
        let s = self.tensor.shape();
        assert_eq!(s.len(), 3, "slice() needs a (W, H, T) mask");
        let (w, h, nt) = (s[0], s[1], s[2]);
        assert!(t < nt);
        let mut out = Tensor::zeros(&[w, h]);
        for x in 0..w {
            for y in 0..h {
                out.data_mut()[x * h + y] = self.tensor.data()[(x * h + y) * nt + t];
            }
        }
        Mask { tensor: out }
    }
}

/// Event stream format on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Csv,
    Binary,
}

/// Parse an event stream, validating coordinates against `geometry`.
///
/// For the binary format the header geometry must match the declared one.
pub fn parse_events(
    source: &mut dyn Read,
    format: StreamFormat,
    geometry: Geometry,
) -> Result<Vec<Event>> {
    match format {
        StreamFormat::Csv => parse_csv(source, geometry),
        StreamFormat::Binary => parse_binary(source, geometry),
    }
}

fn parse_csv(source: &mut dyn Read, geometry: Geometry) -> Result<Vec<Event>> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // Header line is optional; skip anything that does not start digit-like.
        if lineno == 0 && !line.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 4 fields `t_us,x,y,p`, got {}", fields.len()),
            });
        }
        let parse_field = |what: &str, s: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("invalid {what}: {s:?}"),
            })
        };
        let t = parse_field("timestamp", fields[0])?;
        let x = parse_field("x", fields[1])?;
        let y = parse_field("y", fields[2])?;
        let p = parse_field("polarity", fields[3])?;
        if t < 0 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("negative timestamp {t}"),
            });
        }
        if p != 1 && p != -1 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("polarity must be 1 or -1, got {p}"),
            });
        }
        if x < 0 || x > u16::MAX as i64 || y < 0 || y > u16::MAX as i64 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("coordinate ({x}, {y}) out of u16 range"),
            });
        }
        events.push(Event {
            t_us: t as u64,
            x: x as u16,
            y: y as u16,
            polarity: p as i8,
        });
    }
    validate_bounds(&events, geometry)?;
    Ok(events)
}

fn parse_binary(source: &mut dyn Read, geometry: Geometry) -> Result<Vec<Event>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Binary {
            offset: 0,
            msg: "file shorter than 16-byte header".into(),
        });
    }
    if &bytes[0..4] != BINARY_MAGIC {
        return Err(Error::Binary {
            offset: 0,
            msg: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]);
    let h = u16::from_le_bytes([bytes[6], bytes[7]]);
    if w != geometry.width || h != geometry.height {
        return Err(Error::Binary {
            offset: 4,
            msg: format!(
                "file geometry {w}x{h} does not match declared {}x{}",
                geometry.width, geometry.height
            ),
        });
    }
    let body = &bytes[16..];
    if body.len() % RECORD_LEN != 0 {
        return Err(Error::Binary {
            offset: 16 + body.len() - body.len() % RECORD_LEN,
            msg: format!("truncated record ({} trailing bytes)", body.len() % RECORD_LEN),
        });
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = rec[12] as i8;
        if p != 1 && p != -1 {
            return Err(Error::Binary {
                offset: 16 + i * RECORD_LEN + 12,
                msg: format!("polarity byte must encode 1 or -1, got {p}"),
            });
        }
        events.push(Event {
            t_us: t,
            x,
            y,
            polarity: p,
        });
    }
    validate_bounds(&events, geometry)?;
    Ok(events)
}

fn validate_bounds(events: &[Event], geometry: Geometry) -> Result<()> {
    for (index, e) in events.iter().enumerate() {
        if e.x >= geometry.width || e.y >= geometry.height {
            return Err(Error::EventOutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
    }
    Ok(())
}

pub fn write_events_csv(sink: &mut dyn Write, events: &[Event]) -> Result<()> {
    writeln!(sink, "t_us,x,y,p")?;
    for e in events {
        writeln!(sink, "{},{},{},{}", e.t_us, e.x, e.y, e.polarity)?;
    }
    Ok(())
}

pub fn write_events_binary(
    sink: &mut dyn Write,
    events: &[Event],
    geometry: Geometry,
) -> Result<()> {
    sink.write_all(BINARY_MAGIC)?;
    sink.write_all(&geometry.width.to_le_bytes())?;
    sink.write_all(&geometry.height.to_le_bytes())?;
    sink.write_all(&[0u8; 8])?;
    for e in events {
        sink.write_all(&e.t_us.to_le_bytes())?;
        sink.write_all(&e.x.to_le_bytes())?;
        sink.write_all(&e.y.to_le_bytes())?;
        sink.write_all(&[e.polarity as u8])?;
    }
    Ok(())
}

/// Quantize events into a binary indicator volume. Cells are 1 where at
/// least one matching event exists (duplicates within a bin still yield 1);
/// events outside the half-open window are ignored.
pub fn build_event_volume(
    events: &[Event],
    geometry: Geometry,
    spec: WindowSpec,
) -> Result<EventVolume> {
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let bins = spec.bins();
    if bins == 0 {
        return Err(Error::arg("build_event_volume", "window has no bins"));
    }
    let mut tensor = Tensor::zeros(&[w, h, 2, bins]);
    for e in events {
        if let Some(bin) = spec.bin_of(e.t_us) {
            tensor.set4(e.x as usize, e.y as usize, e.channel(), bin, 1.0);
        }
    }
    Ok(EventVolume { tensor, spec })
}

/// First-layer observation mask: 1 wherever events of either polarity occur.
/// Both polarities firing in the same cell still clamp to 1.
pub fn initial_mask(volume: &EventVolume) -> Mask {
    let (w, h, bins) = (volume.width(), volume.height(), volume.bins());
    let mut out = Tensor::zeros(&[w, h, bins]);
    for x in 0..w {
        for y in 0..h {
            for t in 0..bins {
                let s = volume.tensor.at4(x, y, 0, t) + volume.tensor.at4(x, y, 1, t);
                out.data_mut()[(x * h + y) * bins + t] = s.min(1.0);
            }
        }
    }
    Mask { tensor: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GEOM: Geometry = Geometry {
        width: 8,
        height: 6,
    };

    #[test]
    fn empty_csv_gives_empty_list() {
        let mut src = std::io::Cursor::new(Vec::<u8>::new());
        let events = parse_events(&mut src, StreamFormat::Csv, GEOM).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn csv_line_parses_per_format() {
        let mut src = std::io::Cursor::new(b"1000,3,2,1\n".to_vec());
        let events = parse_events(&mut src, StreamFormat::Csv, GEOM).unwrap();
        assert_eq!(
            events,
            vec![Event {
                t_us: 1000,
                x: 3,
                y: 2,
                polarity: 1
            }]
        );
    }

    #[test]
    fn csv_header_is_optional() {
        let mut src = std::io::Cursor::new(b"t_us,x,y,p\n5,1,1,-1\n".to_vec());
        let events = parse_events(&mut src, StreamFormat::Csv, GEOM).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].polarity, -1);
    }

    #[test]
    fn malformed_csv_names_the_line() {
        let mut src = std::io::Cursor::new(b"10,1,1,1\nbogus\n".to_vec());
        let err = parse_events(&mut src, StreamFormat::Csv, GEOM).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_event_names_its_index() {
        let mut src = std::io::Cursor::new(b"10,1,1,1\n11,9,1,1\n".to_vec());
        let err = parse_events(&mut src, StreamFormat::Csv, GEOM).unwrap_err();
        match err {
            Error::EventOutOfBounds { index, x, .. } => {
                assert_eq!(index, 1);
                assert_eq!(x, 9);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let events = vec![
            Event {
                t_us: 0,
                x: 0,
                y: 0,
                polarity: 1,
            },
            Event {
                t_us: 123456789,
                x: 7,
                y: 5,
                polarity: -1,
            },
        ];
        let mut bytes = Vec::new();
        write_events_binary(&mut bytes, &events, GEOM).unwrap();
        let parsed =
            parse_events(&mut std::io::Cursor::new(bytes.clone()), StreamFormat::Binary, GEOM)
                .unwrap();
        assert_eq!(parsed, events);
        let mut again = Vec::new();
        write_events_binary(&mut again, &parsed, GEOM).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncated_binary_record_names_the_offset() {
        let events = vec![Event {
            t_us: 42,
            x: 1,
            y: 1,
            polarity: 1,
        }];
        let mut bytes = Vec::new();
        write_events_binary(&mut bytes, &events, GEOM).unwrap();
        bytes.truncate(bytes.len() - 1);
        let err =
            parse_events(&mut std::io::Cursor::new(bytes), StreamFormat::Binary, GEOM).unwrap_err();
        match err {
            Error::Binary { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binary_geometry_mismatch_is_an_error() {
        let mut bytes = Vec::new();
        write_events_binary(&mut bytes, &[], GEOM).unwrap();
        let wrong = Geometry {
            width: 4,
            height: 6,
        };
        assert!(
            parse_events(&mut std::io::Cursor::new(bytes), StreamFormat::Binary, wrong).is_err()
        );
    }

    #[test]
    fn volume_quantizes_by_floor_of_offset() {
        let spec = WindowSpec::new(0, 10_000, 2_000).unwrap();
        let events = vec![Event {
            t_us: 3_000,
            x: 1,
            y: 1,
            polarity: 1,
        }];
        let vol = build_event_volume(&events, GEOM, spec).unwrap();
        assert_eq!(vol.tensor.at4(1, 1, 0, 1), 1.0);
        assert_eq!(vol.tensor.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn empty_stream_gives_zero_volume_and_zero_mask() {
        let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
        let vol = build_event_volume(&[], GEOM, spec).unwrap();
        assert!(vol.tensor.data().iter().all(|&v| v == 0.0));
        let mask = initial_mask(&vol);
        assert!(mask.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_is_half_open() {
        let spec = WindowSpec::new(1_000, 4_000, 1_000).unwrap();
        assert_eq!(spec.bin_of(999), None);
        assert_eq!(spec.bin_of(1_000), Some(0));
        assert_eq!(spec.bin_of(4_999), Some(3));
        assert_eq!(spec.bin_of(5_000), None);
    }

    #[test]
    fn both_polarities_clamp_mask_to_one() {
        let spec = WindowSpec::new(0, 2_000, 1_000).unwrap();
        let events = vec![
            Event {
                t_us: 100,
                x: 2,
                y: 3,
                polarity: 1,
            },
            Event {
                t_us: 200,
                x: 2,
                y: 3,
                polarity: -1,
            },
        ];
        let vol = build_event_volume(&events, GEOM, spec).unwrap();
        let mask = initial_mask(&vol);
        assert_eq!(mask.tensor.data()[(2 * 6 + 3) * 2], 1.0);
        assert!(mask.tensor.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn volume_matches_brute_force_indicator() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = WindowSpec::new(500, 8_000, 1_000).unwrap();
        let events: Vec<Event> = (0..1000)
            .map(|_| Event {
                t_us: rng.random_range(0..12_000u64),
                x: rng.random_range(0..GEOM.width),
                y: rng.random_range(0..GEOM.height),
                polarity: if rng.random_range(0..2u32) == 0 { 1 } else { -1 },
            })
            .collect();
        let vol = build_event_volume(&events, GEOM, spec).unwrap();
        for x in 0..GEOM.width as usize {
            for y in 0..GEOM.height as usize {
                for c in 0..2usize {
                    for t in 0..spec.bins() {
                        let member = events.iter().any(|e| {
                            e.x as usize == x
                                && e.y as usize == y
                                && e.channel() == c
                                && spec.bin_of(e.t_us) == Some(t)
                        });
                        assert_eq!(vol.tensor.at4(x, y, c, t), if member { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn volume_is_permutation_invariant(seed in 0u64..1000) {
            use rand::{RngExt, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = WindowSpec::new(0, 6_000, 1_000).unwrap();
            let mut events: Vec<Event> = (0..rng.random_range(0..60usize))
                .map(|_| Event {
                    t_us: rng.random_range(0..7_000u64),
                    x: rng.random_range(0..GEOM.width),
                    y: rng.random_range(0..GEOM.height),
                    polarity: if rng.random_range(0..2u32) == 0 { 1 } else { -1 },
                })
                .collect();
            let a = build_event_volume(&events, GEOM, spec).unwrap();
            events.shuffle(&mut rng);
            let b = build_event_volume(&events, GEOM, spec).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mask_is_indicator_of_summed_polarity_support(seed in 0u64..1000) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
            let events: Vec<Event> = (0..rng.random_range(0..40usize))
                .map(|_| Event {
                    t_us: rng.random_range(0..4_000u64),
                    x: rng.random_range(0..GEOM.width),
                    y: rng.random_range(0..GEOM.height),
                    polarity: if rng.random_range(0..2u32) == 0 { 1 } else { -1 },
                })
                .collect();
            let vol = build_event_volume(&events, GEOM, spec).unwrap();
            let mask = initial_mask(&vol);
            for x in 0..GEOM.width as usize {
                for y in 0..GEOM.height as usize {
                    for t in 0..spec.bins() {
                        let support =
                            vol.tensor.at4(x, y, 0, t) + vol.tensor.at4(x, y, 1, t) > 0.0;
                        let m = mask.tensor.data()[(x * GEOM.height as usize + y) * spec.bins() + t];
                        prop_assert_eq!(m == 1.0, support);
                    }
                }
            }
        }

        #[test]
        fn shifting_timestamps_shifts_the_volume(shift_bins in 1u64..3) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let bin = 1_000u64;
            let spec = WindowSpec::new(0, 8_000, bin).unwrap();
            let events: Vec<Event> = (0..50)
                .map(|_| Event {
                    t_us: rng.random_range(0..8_000u64),
                    x: rng.random_range(0..GEOM.width),
                    y: rng.random_range(0..GEOM.height),
                    polarity: 1,
                })
                .collect();
            let base = build_event_volume(&events, GEOM, spec).unwrap();
            let shifted_events: Vec<Event> = events
                .iter()
                .map(|e| Event { t_us: e.t_us + shift_bins * bin, ..*e })
                .collect();
            let shifted = build_event_volume(&shifted_events, GEOM, spec).unwrap();
            let bins = spec.bins();
            for x in 0..GEOM.width as usize {
                for y in 0..GEOM.height as usize {
                    for c in 0..2 {
                        for t in 0..bins {
                            let want = if t >= shift_bins as usize {
                                base.tensor.at4(x, y, c, t - shift_bins as usize)
                            } else {
                                0.0
                            };
                            prop_assert_eq!(shifted.tensor.at4(x, y, c, t), want);
                        }
                    }
                }
            }
        }
    }
}
