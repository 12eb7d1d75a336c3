//! Paced UDP stream over the local stack, timestamped on arrival.

use std::net::UdpSocket;
use std::time::{Duration, Instant};

use edgepod_core::telemetry::{compute_jitter, JitterError, JitterReport, PacketTrace};
use thiserror::Error;

pub const DEFAULT_PAYLOAD_BYTES: u32 = 1250;
pub const DEFAULT_SPIKE_THRESHOLD_MS: f64 = 1.75;

#[derive(Debug, Error)]
pub enum LoopbackError {
    #[error("rate must be positive")]
    InvalidRate,
    #[error("duration must be positive")]
    InvalidDuration,
    #[error("payload must hold at least the 8 byte sequence number")]
    PayloadTooSmall,
    #[error("socket: {0}")]
    Socket(#[from] std::io::Error),
    #[error(transparent)]
    Jitter(#[from] JitterError),
}

#[derive(Debug, Clone)]
pub struct LoopbackCapture {
    pub trace: PacketTrace,
    pub sent: u64,
    pub received: u64,
}

/// Send `duration · rate / (payload · 8)` datagrams at a fixed pace and
/// record arrival times. Sequence numbers let late or duplicated datagrams
/// be dropped.
pub fn capture_loopback(duration: Duration, rate_bps: f64, payload_bytes: u32) -> Result<LoopbackCapture, LoopbackError> {
    if rate_bps <= 0.0 || !rate_bps.is_finite() {
        return Err(LoopbackError::InvalidRate);
    }
    if duration.is_zero() {
        return Err(LoopbackError::InvalidDuration);
    }
    if payload_bytes < 8 {
        return Err(LoopbackError::PayloadTooSmall);
    }
    let interval = Duration::from_secs_f64(payload_bytes as f64 * 8.0 / rate_bps);
    let count = (duration.as_secs_f64() / interval.as_secs_f64()).round().max(2.0) as u64;

    let rx = UdpSocket::bind(("127.0.0.1", 0))?;
    rx.set_read_timeout(Some(Duration::from_millis(500)))?;
    let target = rx.local_addr()?;

    let receiver = std::thread::spawn(move || {
        let origin = Instant::now();
        let mut arrivals = Vec::with_capacity(count as usize);
        let mut last_seq = None;
        let mut buf = vec![0u8; 65_536];
        while (arrivals.len() as u64) < count {
            match rx.recv(&mut buf) {
                Ok(n) if n >= 8 => {
                    let at = origin.elapsed().as_secs_f64();
                    let seq = u64::from_be_bytes(buf[..8].try_into().expect("8 bytes"));
                    if last_seq.is_none_or(|l| seq > l) {
                        last_seq = Some(seq);
                        arrivals.push(at);
                    }
                    if seq + 1 == count {
                        break;
                    }
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
        arrivals
    });

    let tx = UdpSocket::bind(("127.0.0.1", 0))?;
    let mut packet = vec![0u8; payload_bytes as usize];
    let start = Instant::now();
    for seq in 0..count {
        let due = start + interval.mul_f64(seq as f64);
        pace_until(due);
        packet[..8].copy_from_slice(&seq.to_be_bytes());
        tx.send_to(&packet, target)?;
    }
    let mut arrivals = receiver.join().expect("receiver thread");
    // arrival timestamps are strictly increasing at microsecond precision
    for a in arrivals.iter_mut() {
        *a = (*a * 1e6).round() / 1e6;
    }
    arrivals.dedup_by(|b, a| *b <= *a);
    let received = arrivals.len() as u64;
    Ok(LoopbackCapture {
        trace: PacketTrace {
            arrivals,
            nominal_rate_bps: rate_bps,
            payload_bytes,
        },
        sent: count,
        received,
    })
}

pub fn measure_loopback_jitter(duration: Duration, rate_bps: f64) -> Result<JitterReport, LoopbackError> {
    let capture = capture_loopback(duration, rate_bps, DEFAULT_PAYLOAD_BYTES)?;
    let mut report = compute_jitter(&capture.trace, DEFAULT_SPIKE_THRESHOLD_MS)?;
    report.lossy = (capture.sent - capture.received) as f64 > 0.01 * capture.sent as f64;
    Ok(report)
}

/// Sleep most of the way, then spin for the last stretch.
fn pace_until(due: Instant) {
    const SPIN: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= due {
            return;
        }
        let left = due - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::hint::spin_loop();
        }
    }
}

