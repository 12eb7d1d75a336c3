//! Control channel framing.
//!
//! Every frame is a 2-byte header followed by `len` payload bytes:
//!
//! ```text
//! +--------+--------+----------------+
//! | type u8| len u8 | payload (len)  |
//! +--------+--------+----------------+
//! ```
//!
//! | type | name      | payload                                   |
//! |------|-----------|-------------------------------------------|
//! | 0x01 | HELLO     | remote_port u16 BE, name_len u8, pod name, |
//! |      |           | pod-local target address, both UTF-8      |
//! | 0x02 | HELLO_ACK | 0x00 on success, else 0x01 + UTF-8 reason |
//! | 0x03 | PING      | 1 byte nonce                              |
//! | 0x04 | PONG      | nonce echoed                              |
//! | 0x05 | OPEN      | stream id u16 BE                          |
//! | 0x06 | DATA      | stream id u16 BE, up to 253 bytes         |
//! | 0x07 | CLOSE     | stream id u16 BE                          |
//!
//! OPEN is sent by the gateway only. DATA and CLOSE flow both ways; CLOSE
//! half-closes the sender's direction of the stream.

use std::io;

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const MAX_PAYLOAD: usize = u8::MAX as usize;
pub const MAX_DATA: usize = MAX_PAYLOAD - 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello { remote_port: u16, pod_name: String, target: String },
    HelloAck(Result<(), String>),
    Ping(u8),
    Pong(u8),
    Open(u16),
    Data(u16, Vec<u8>),
    Close(u16),
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    let mut end = s.len().min(max);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let (ty, payload): (u8, Vec<u8>) = match self {
            Frame::Hello { remote_port, pod_name, target } => {
                let name = truncate_utf8(pod_name, 128);
                let mut p = remote_port.to_be_bytes().to_vec();
                p.push(name.len() as u8);
                p.extend_from_slice(name.as_bytes());
                p.extend_from_slice(truncate_utf8(target, MAX_PAYLOAD - 3 - name.len()).as_bytes());
                (0x01, p)
            }
            Frame::HelloAck(Ok(())) => (0x02, vec![0]),
            Frame::HelloAck(Err(reason)) => {
                let mut p = vec![1];
                p.extend_from_slice(truncate_utf8(reason, MAX_PAYLOAD - 1).as_bytes());
                (0x02, p)
            }
            Frame::Ping(n) => (0x03, vec![*n]),
            Frame::Pong(n) => (0x04, vec![*n]),
            Frame::Open(id) => (0x05, id.to_be_bytes().to_vec()),
            Frame::Data(id, bytes) => {
                assert!(bytes.len() <= MAX_DATA, "data frame over {MAX_DATA} bytes");
                let mut p = id.to_be_bytes().to_vec();
                p.extend_from_slice(bytes);
                (0x06, p)
            }
            Frame::Close(id) => (0x07, id.to_be_bytes().to_vec()),
        };
        let mut out = Vec::with_capacity(2 + payload.len());
        out.push(ty);
        out.push(payload.len() as u8);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(ty: u8, payload: &[u8]) -> io::Result<Frame> {
        let stream_id = || -> io::Result<u16> {
            payload
                .get(..2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .ok_or_else(|| invalid("missing stream id"))
        };
        let one = || payload.first().copied().ok_or_else(|| invalid("missing nonce"));
        Ok(match ty {
            0x01 => {
                let remote_port = stream_id()?;
                let name_len = *payload.get(2).ok_or_else(|| invalid("missing name length"))? as usize;
                let name = payload.get(3..3 + name_len).ok_or_else(|| invalid("short pod name"))?;
                let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| invalid("hello not UTF-8"));
                Frame::Hello {
                    remote_port,
                    pod_name: text(name)?,
                    target: text(&payload[3 + name_len..])?,
                }
            }
            0x02 => match payload.first() {
                Some(0) => Frame::HelloAck(Ok(())),
                Some(_) => Frame::HelloAck(Err(String::from_utf8_lossy(&payload[1..]).into_owned())),
                None => return Err(invalid("empty ack")),
            },
            0x03 => Frame::Ping(one()?),
            0x04 => Frame::Pong(one()?),
            0x05 => Frame::Open(stream_id()?),
            0x06 => Frame::Data(stream_id()?, payload[2..].to_vec()),
            0x07 => Frame::Close(stream_id()?),
            other => return Err(invalid(format!("unknown frame type {other:#04x}"))),
        })
    }
}

/// Read one frame. Returns `None` on a clean EOF at a frame boundary.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Frame>> {
    let mut header = [0u8; 2];
    match r.read_exact(&mut header[..1]).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut header[1..]).await?;
    let mut payload = vec![0u8; header[1] as usize];
    r.read_exact(&mut payload).await?;
    Frame::decode(header[0], &payload).map(Some)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode()).await
}
