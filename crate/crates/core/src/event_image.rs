//! Ternary event images.
//!
//! Every pixel starts at 0.5. An event sets its pixel to 1.0 (positive
//! polarity) or 0.0 (negative polarity); events are applied oldest first so
//! the most recent event at a pixel wins.

use std::io::Write;

use crate::error::{Error, Result};
use crate::event_io::{Event, EventWindow};

pub const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EventImage {
    /// Row-major, `h * w` values; row index is the event `y`.
    pub pixels: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub source_window: usize,
    pub fraction_used: f64,
}

impl EventImage {
    pub fn blank(h: usize, w: usize) -> Self {
        EventImage {
            pixels: vec![BACKGROUND; h * w],
            h,
            w,
            source_window: 0,
            fraction_used: 1.0,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.w + col]
    }

    /// Writes a plain (P2) PGM with 0 -> 0, 0.5 -> 128, 1 -> 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "P2\n{} {}\n255", self.w, self.h)?;
        for row in self.pixels.chunks(self.w) {
            let line: Vec<&str> = row
                .iter()
                .map(|&v| {
                    if v == 0.0 {
                        "0"
                    } else if v == 1.0 {
                        "255"
                    } else {
                        "128"
                    }
                })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Most recent `ceil(fraction * n)` events of the window, in ascending time.
pub fn select_fraction(window: &EventWindow, fraction: f64) -> Result<&[Event]> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range {
            what: "fraction",
            value: fraction,
            range: "(0, 1]",
        });
    }
    let n = window.events.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    Ok(&window.events[n - keep..])
}

/// Renders events (assumed ascending in time) into an `h x w` image.
pub fn build_image(events: &[Event], h: usize, w: usize) -> Result<EventImage> {
    let mut img = EventImage::blank(h, w);
    for e in events {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= w || y >= h {
            return Err(Error::Bounds {
                context: format!("event at t={}", e.t),
                x: e.x as i64,
                y: e.y as i64,
                w,
                h,
            });
        }
        img.pixels[y * w + x] = if e.rho > 0 { 1.0 } else { 0.0 };
    }
    Ok(img)
}

/// `select_fraction` followed by `build_image`, tagging the result with the
/// window's ordinal.
pub fn window_image(window: &EventWindow, fraction: f64, h: usize, w: usize) -> Result<EventImage> {
    let events = select_fraction(window, fraction)?;
    let mut img = build_image(events, h, w)?;
    img.source_window = window.sequence_index;
    img.fraction_used = fraction;
    Ok(img)
}
