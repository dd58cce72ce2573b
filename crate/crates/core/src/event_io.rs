//! Event stream and groundtruth ingestion, windowing and train/test splits.
//!
//! Text formats follow the event-camera dataset exports: one record per
//! line, whitespace separated.
//!
//! ```text
//! events.txt       t x y p              (p in {0, 1})
//! groundtruth.txt  t px py pz qx qy qz qw
//! ```

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// DAVIS 240C resolution, used when nothing else is configured.
pub const DEFAULT_SENSOR_W: usize = 240;
pub const DEFAULT_SENSOR_H: usize = 180;

/// One brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    /// Pixel column.
    pub x: u32,
    /// Pixel row.
    pub y: u32,
    /// Polarity, exactly -1 or +1.
    pub rho: i8,
}

impl Event {
    pub fn new(t: f64, x: u32, y: u32, rho: i8) -> Self {
        debug_assert!(rho == 1 || rho == -1);
        Event { t, x, y, rho }
    }
}

/// Groundtruth camera pose. `q` is stored as (qx, qy, qz, qw), unit length
/// and sign-canonicalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLabel {
    pub t: f64,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

/// Events of one groundtruth interval together with the pose at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub label: PoseLabel,
    /// Ordinal of the interval inside the source sequence. Empty intervals
    /// are dropped, so ordinals may have gaps.
    pub sequence_index: usize,
}

/// Output of [`window_events`].
#[derive(Debug, Clone, Default)]
pub struct Windowing {
    pub windows: Vec<EventWindow>,
    /// Intervals that held no events.
    pub skipped_empty: usize,
    /// Events before the first or after the last groundtruth timestamp.
    pub discarded_events: usize,
}

/// Normalizes a quaternion and moves it to the qw >= 0 hemisphere. When
/// qw == 0 the first nonzero of (qx, qy, qz) is made positive.
///
/// Already-unit inputs are left unscaled so the operation is idempotent.
/// Returns `None` for a zero (or non-finite) quaternion.
pub fn canonicalize_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    if !(n2 > 0.0) || !n2.is_finite() {
        return None;
    }
    let mut out = q;
    if (n2 - 1.0).abs() > 8.0 * f64::EPSILON {
        let n = n2.sqrt();
        for v in &mut out {
            *v /= n;
        }
    }
    let flip = if out[3] != 0.0 {
        out[3] < 0.0
    } else {
        out[..3].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        for v in &mut out {
            *v = -*v;
        }
    }
    // avoid -0.0 so canonical values print identically
    for v in &mut out {
        if *v == 0.0 {
            *v = 0.0;
        }
    }
    Some(out)
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, name: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{name}` from {tok:?}"),
    })
}

fn no_trailing<'a>(mut it: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
    match it.next() {
        Some(extra) => Err(Error::Parse {
            line,
            msg: format!("unexpected trailing field {extra:?}"),
        }),
        None => Ok(()),
    }
}

/// Reads `t x y p` lines. Polarity 0 maps to -1, 1 to +1. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn parse_events<R: BufRead>(reader: R, sensor_w: usize, sensor_h: usize) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut non_monotone = 0usize;
    let mut prev_t = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let t: f64 = field(toks.next(), line_no, "t")?;
        let x: i64 = field(toks.next(), line_no, "x")?;
        let y: i64 = field(toks.next(), line_no, "y")?;
        let p: u8 = field(toks.next(), line_no, "p")?;
        no_trailing(toks, line_no)?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("timestamp {t} must be finite and non-negative"),
            });
        }
        let rho = match p {
            0 => -1,
            1 => 1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("polarity must be 0 or 1, got {other}"),
                })
            }
        };
        if x < 0 || y < 0 || x as usize >= sensor_w || y as usize >= sensor_h {
            return Err(Error::Bounds {
                context: format!("line {line_no}"),
                x,
                y,
                w: sensor_w,
                h: sensor_h,
            });
        }
        if t < prev_t {
            non_monotone += 1;
        }
        prev_t = t;
        events.push(Event::new(t, x as u32, y as u32, rho));
    }
    if non_monotone > 0 {
        log::warn!("{non_monotone} event timestamps go backwards; events will be reordered when windowed");
    }
    Ok(events)
}

/// Reads `t px py pz qx qy qz qw` lines, canonicalizing each quaternion.
pub fn parse_poses<R: BufRead>(reader: R) -> Result<Vec<PoseLabel>> {
    let mut poses: Vec<PoseLabel> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let t: f64 = field(toks.next(), line_no, "t")?;
        let mut p = [0.0f64; 3];
        for (k, name) in ["px", "py", "pz"].iter().enumerate() {
            p[k] = field(toks.next(), line_no, name)?;
        }
        let mut q = [0.0f64; 4];
        for (k, name) in ["qx", "qy", "qz", "qw"].iter().enumerate() {
            q[k] = field(toks.next(), line_no, name)?;
        }
        no_trailing(toks, line_no)?;
        if !t.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite value".into(),
            });
        }
        let q = canonicalize_quaternion(q).ok_or(Error::InvalidRotation { line: line_no })?;
        if let Some(prev) = poses.last() {
            if t <= prev.t {
                return Err(Error::Ordering {
                    line: line_no,
                    t,
                    prev: prev.t,
                });
            }
        }
        poses.push(PoseLabel { t, p, q });
    }
    Ok(poses)
}

/// Writes events in the `t x y p` format. `{}` formatting of f64 is the
/// shortest representation that parses back to the same value.
pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> Result<()> {
    for e in events {
        let p = if e.rho > 0 { 1 } else { 0 };
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, p)?;
    }
    Ok(())
}

pub fn write_poses<W: Write>(mut out: W, poses: &[PoseLabel]) -> Result<()> {
    for l in poses {
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            l.t, l.p[0], l.p[1], l.p[2], l.q[0], l.q[1], l.q[2], l.q[3]
        )?;
    }
    Ok(())
}

/// Groups events into the half-open groundtruth intervals (t_i, t_i+1],
/// labeling each with the pose at t_i+1. Empty intervals are dropped.
pub fn window_events(events: &[Event], poses: &[PoseLabel]) -> Result<Windowing> {
    if poses.len() < 2 {
        return Err(Error::InsufficientGroundtruth(poses.len()));
    }
    if poses.windows(2).any(|w| !(w[0].t < w[1].t)) {
        return Err(Error::Precondition(
            "groundtruth timestamps must be strictly increasing".into(),
        ));
    }

    let mut sorted: Vec<Event> = events.to_vec();
    // stable: ties keep file order
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));

    let first_t = poses[0].t;
    let last_t = poses[poses.len() - 1].t;
    let mut out = Windowing::default();
    let mut cursor = sorted.partition_point(|e| e.t <= first_t);
    out.discarded_events += cursor;

    for (i, pair) in poses.windows(2).enumerate() {
        let end = pair[1].t;
        let stop = cursor + sorted[cursor..].partition_point(|e| e.t <= end);
        if stop == cursor {
            out.skipped_empty += 1;
        } else {
            out.windows.push(EventWindow {
                events: sorted[cursor..stop].to_vec(),
                label: pair[1],
                sequence_index: i,
            });
        }
        cursor = stop;
    }
    debug_assert!(sorted[cursor..].iter().all(|e| e.t > last_t));
    out.discarded_events += sorted.len() - cursor;
    Ok(out)
}

fn check_split_args(n: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Range {
            what: "train_fraction",
            value: train_fraction,
            range: "(0, 1)",
        });
    }
    if n < 2 {
        return Err(Error::InsufficientData(n));
    }
    Ok((train_fraction * n as f64).floor() as usize)
}

/// Uniformly random partition with `floor(fraction * N)` training items.
/// Both sides keep the input's relative order.
pub fn split_random<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n_train = check_split_args(items.len(), train_fraction)?;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut in_train = vec![false; items.len()];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(items.len() - n_train);
    for (item, is_train) in items.iter().zip(in_train) {
        if is_train {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Temporal prefix/suffix split: the first `floor(fraction * N)` items train.
pub fn split_novel<T: Clone>(items: &[T], train_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    let n_train = check_split_args(items.len(), train_fraction)?;
    Ok((items[..n_train].to_vec(), items[n_train..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64) -> Event {
        Event::new(t, 0, 0, 1)
    }

    fn pose(t: f64) -> PoseLabel {
        PoseLabel {
            t,
            p: [t, 0.0, 0.0],
            q: [0.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn parses_event_lines() {
        let evs = parse_events("0.003811 96 133 0\n\n1.5 0 0 1\n".as_bytes(), 240, 180).unwrap();
        assert_eq!(evs, vec![Event::new(0.003811, 96, 133, -1), Event::new(1.5, 0, 0, 1)]);
    }

    #[test]
    fn event_out_of_bounds() {
        let err = parse_events("0.1 500 10 1".as_bytes(), 240, 180).unwrap_err();
        assert!(matches!(err, Error::Bounds { x: 500, y: 10, .. }), "{err}");
    }

    #[test]
    fn malformed_event_reports_line() {
        let err = parse_events("0.1 1 1 1\n0.2 1 x 1\n".as_bytes(), 240, 180).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_events("0.1 1 1 2\n".as_bytes(), 240, 180).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_events("0.1 1 1\n".as_bytes(), 240, 180).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn non_monotone_events_are_accepted() {
        let evs = parse_events("0.2 1 1 1\n0.1 1 1 0\n".as_bytes(), 240, 180).unwrap();
        assert_eq!(evs.len(), 2);
        assert_eq!(evs[0].t, 0.2);
    }

    #[test]
    fn pose_quaternion_normalized() {
        let poses = parse_poses("0.0 1 2 3 0 0 0 2".as_bytes()).unwrap();
        assert_eq!(poses[0].p, [1.0, 2.0, 3.0]);
        assert_eq!(poses[0].q, [0.0, 0.0, 0.0, 1.0]);
        let poses = parse_poses("0.0 0 0 0 0 0 0 -1".as_bytes()).unwrap();
        assert_eq!(poses[0].q, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pose_errors() {
        let err = parse_poses("0.0 0 0 0 0 0 0 0".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::InvalidRotation { line: 1 }));
        let err = parse_poses("0.0 0 0 0 0 0 0 1\n0.0 0 0 0 0 0 0 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Ordering { line: 2, .. }));
    }

    #[test]
    fn canonical_sign_with_zero_w() {
        assert_eq!(
            canonicalize_quaternion([0.0, -1.0, 0.0, 0.0]),
            Some([0.0, 1.0, 0.0, 0.0])
        );
        assert_eq!(
            canonicalize_quaternion([0.0, 0.0, 3.0, 0.0]),
            Some([0.0, 0.0, 1.0, 0.0])
        );
    }

    #[test]
    fn windows_follow_interval_rule() {
        let poses = [pose(0.0), pose(0.005), pose(0.010)];
        let w = window_events(&[ev(0.001), ev(0.004), ev(0.007)], &poses).unwrap();
        assert_eq!(w.windows.len(), 2);
        assert_eq!(w.windows[0].events.len(), 2);
        assert_eq!(w.windows[0].label.t, 0.005);
        assert_eq!(w.windows[1].events, vec![ev(0.007)]);
        assert_eq!(w.windows[1].label.t, 0.010);
        assert_eq!(w.windows[1].sequence_index, 1);
    }

    #[test]
    fn event_on_boundary_joins_earlier_window() {
        let poses = [pose(0.0), pose(0.005), pose(0.010)];
        let w = window_events(&[ev(0.005)], &poses).unwrap();
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.windows[0].label.t, 0.005);
        assert_eq!(w.skipped_empty, 1);
    }

    #[test]
    fn empty_interval_is_skipped() {
        let w = window_events(&[ev(0.0), ev(0.02)], &[pose(0.0), pose(0.005)]).unwrap();
        assert!(w.windows.is_empty());
        assert_eq!(w.skipped_empty, 1);
        assert_eq!(w.discarded_events, 2);
    }

    #[test]
    fn windowing_needs_two_poses() {
        assert!(matches!(
            window_events(&[ev(0.1)], &[pose(0.0)]),
            Err(Error::InsufficientGroundtruth(1))
        ));
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..10).collect();
        let (tr, te) = split_random(&items, 0.7, 42).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(split_random(&items, 0.7, 42).unwrap(), (tr, te));

        let (tr, te) = split_novel(&items, 0.7).unwrap();
        assert_eq!(tr, (0..7).collect::<Vec<_>>());
        assert_eq!(te, vec![7, 8, 9]);
        let (tr, te) = split_novel(&[0, 1, 2], 0.7).unwrap();
        assert_eq!((tr, te), (vec![0, 1], vec![2]));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_random(&[1], 0.7, 0), Err(Error::InsufficientData(1))));
        assert!(matches!(split_novel(&[1], 0.7), Err(Error::InsufficientData(1))));
        assert!(matches!(split_novel(&[1, 2], 1.0), Err(Error::Range { .. })));
    }
}
