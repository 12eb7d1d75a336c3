//! Stream multiplexing over one framed control connection, shared by the
//! gateway and pod sides.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::JoinSet;

use crate::frame::{read_frame, write_frame, Frame, MAX_DATA};

pub(crate) type Inbound = mpsc::UnboundedSender<Vec<u8>>;

/// Inbound channels of open streams, by stream id.
#[derive(Default, Clone)]
pub(crate) struct Streams(Arc<Mutex<HashMap<u16, Inbound>>>);

impl Streams {
    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<u16, Inbound>> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Deliver peer data. Returns false for an unknown stream.
    pub(crate) fn deliver(&self, id: u16, bytes: Vec<u8>) -> bool {
        match self.lock().get(&id) {
            Some(tx) => tx.send(bytes).is_ok(),
            None => false,
        }
    }

    /// Peer half-closed the stream: stop writing to the local socket.
    pub(crate) fn close(&self, id: u16) {
        self.lock().remove(&id);
    }

    pub(crate) fn contains(&self, id: u16) -> bool {
        self.lock().contains_key(&id)
    }
}

/// Start relaying `tcp` as stream `id`. Local bytes go out as DATA frames
/// followed by CLOSE at EOF; peer DATA is written to the socket until the
/// peer's CLOSE arrives.
pub(crate) fn spawn_stream(
    tasks: &mut JoinSet<()>,
    id: u16,
    tcp: TcpStream,
    frames: mpsc::Sender<Frame>,
    streams: &Streams,
) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    streams.lock().insert(id, tx);
    let (mut read_half, mut write_half) = tcp.into_split();

    tasks.spawn(async move {
        let mut buf = vec![0u8; MAX_DATA];
        loop {
            match read_half.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if frames.send(Frame::Data(id, buf[..n].to_vec())).await.is_err() {
                        return;
                    }
                }
            }
        }
        let _ = frames.send(Frame::Close(id)).await;
    });
    tasks.spawn(async move {
        while let Some(bytes) = rx.recv().await {
            if write_half.write_all(&bytes).await.is_err() {
                break;
            }
        }
        let _ = write_half.shutdown().await;
    });
}

/// Forward frames from `rx` to the connection's write half.
pub(crate) fn spawn_writer(tasks: &mut JoinSet<()>, mut sink: OwnedWriteHalf, mut rx: mpsc::Receiver<Frame>) {
    tasks.spawn(async move {
        while let Some(frame) = rx.recv().await {
            if write_frame(&mut sink, &frame).await.is_err() {
                break;
            }
        }
        let _ = sink.shutdown().await;
    });
}

/// Read frames into a channel so callers can `select!` on them safely.
/// The channel closes on EOF or a read error.
pub(crate) fn spawn_reader(
    tasks: &mut JoinSet<()>,
    mut source: tokio::net::tcp::OwnedReadHalf,
) -> mpsc::Receiver<Frame> {
    let (tx, rx) = mpsc::channel(256);
    tasks.spawn(async move {
        loop {
            match read_frame(&mut source).await {
                Ok(Some(frame)) => {
                    if tx.send(frame).await.is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(error = %e, "control channel read failed");
                    break;
                }
            }
        }
    });
    rx
}
