//! Pod side of a reverse tunnel, plus the stub display service a pod runs.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::{JoinHandle, JoinSet};

use crate::frame::{read_frame, write_frame, Frame};
use crate::mux::{spawn_reader, spawn_stream, spawn_writer, Streams};

/// Pod-local address that tunnel streams are connected to. Empty until the
/// display service is up; streams opened before then are refused.
#[derive(Debug, Clone, Default)]
pub struct TargetSlot(Arc<Mutex<Option<SocketAddr>>>);

impl TargetSlot {
    pub fn new(addr: Option<SocketAddr>) -> Self {
        Self(Arc::new(Mutex::new(addr)))
    }

    pub fn set(&self, addr: Option<SocketAddr>) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()) = addr;
    }

    pub fn get(&self) -> Option<SocketAddr> {
        *self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A registered reverse tunnel, dialed from the pod to the gateway.
#[derive(Debug)]
pub struct TunnelClient {
    pod_name: String,
    remote_port: u16,
    frozen: Arc<AtomicBool>,
    task: JoinHandle<()>,
}

impl TunnelClient {
    pub async fn connect(
        gateway: SocketAddr,
        pod_name: &str,
        remote_port: u16,
        target: TargetSlot,
    ) -> io::Result<Self> {
        let conn = TcpStream::connect(gateway).await?;
        conn.set_nodelay(true)?;
        let (mut read_half, mut write_half) = conn.into_split();
        let hello = Frame::Hello {
            remote_port,
            pod_name: pod_name.to_string(),
            target: target.get().map_or_else(|| "pending".to_string(), |a| a.to_string()),
        };
        write_frame(&mut write_half, &hello).await?;
        match read_frame(&mut read_half).await? {
            Some(Frame::HelloAck(Ok(()))) => {}
            Some(Frame::HelloAck(Err(reason))) => {
                return Err(io::Error::new(io::ErrorKind::AddrInUse, reason));
            }
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("expected HELLO_ACK, got {other:?}"),
                ))
            }
        }
        let frozen = Arc::new(AtomicBool::new(false));
        let task = tokio::spawn(run_client(read_half, write_half, target, Arc::clone(&frozen)));
        Ok(Self {
            pod_name: pod_name.to_string(),
            remote_port,
            frozen,
            task,
        })
    }

    pub fn pod_name(&self) -> &str {
        &self.pod_name
    }

    pub fn remote_port(&self) -> u16 {
        self.remote_port
    }

    /// Stop answering anything on the control channel while keeping the
    /// connection open, like a hung process.
    pub fn freeze(&self) {
        self.frozen.store(true, Ordering::SeqCst);
    }

    pub fn is_running(&self) -> bool {
        !self.task.is_finished()
    }

    pub fn close(&self) {
        self.task.abort();
    }
}

impl Drop for TunnelClient {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn run_client(
    read_half: tokio::net::tcp::OwnedReadHalf,
    write_half: tokio::net::tcp::OwnedWriteHalf,
    target: TargetSlot,
    frozen: Arc<AtomicBool>,
) {
    let mut tasks = JoinSet::new();
    let (frames_tx, frames_rx) = mpsc::channel::<Frame>(256);
    spawn_writer(&mut tasks, write_half, frames_rx);
    let mut inbound = spawn_reader(&mut tasks, read_half);
    let streams = Streams::default();

    loop {
        let frame = tokio::select! {
            f = inbound.recv() => f,
            Some(_) = tasks.join_next(), if !tasks.is_empty() => continue,
        };
        let Some(frame) = frame else { break };
        if frozen.load(Ordering::SeqCst) {
            continue;
        }
        match frame {
            Frame::Ping(n) => {
                let _ = frames_tx.send(Frame::Pong(n)).await;
            }
            Frame::Open(id) => {
                let conn = match target.get() {
                    Some(addr) => TcpStream::connect(addr).await,
                    None => Err(io::Error::new(io::ErrorKind::ConnectionRefused, "no display yet")),
                };
                match conn {
                    Ok(conn) => {
                        let _ = conn.set_nodelay(true);
                        spawn_stream(&mut tasks, id, conn, frames_tx.clone(), &streams);
                    }
                    Err(e) => {
                        tracing::debug!(stream = id, error = %e, "pod-side connect failed");
                        let _ = frames_tx.send(Frame::Close(id)).await;
                    }
                }
            }
            Frame::Data(id, bytes) => {
                streams.deliver(id, bytes);
            }
            Frame::Close(id) => streams.close(id),
            Frame::Pong(_) => {}
            other => tracing::warn!(frame = ?other, "unexpected frame from gateway"),
        }
    }
}

/// Stand-in for the pod's display server. An HTTP request gets a one-line
/// banner naming the pod; any other byte stream is echoed back.
#[derive(Debug)]
pub struct DisplayServer {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

pub fn banner(pod_name: &str) -> String {
    format!("edgepod display {pod_name}\n")
}

impl DisplayServer {
    pub async fn start(pod_name: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let body = banner(pod_name);
        let task = tokio::spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                let accepted = tokio::select! {
                    a = listener.accept() => a,
                    Some(_) = conns.join_next(), if !conns.is_empty() => continue,
                };
                let Ok((conn, _)) = accepted else { continue };
                conns.spawn(serve_display(conn, body.clone()));
            }
        });
        Ok(Self { addr, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_running(&self) -> bool {
        !self.task.is_finished()
    }

    pub fn stop(&self) {
        self.task.abort();
    }
}

impl Drop for DisplayServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve_display(mut conn: TcpStream, body: String) {
    let mut buf = vec![0u8; 16 * 1024];
    let n = match conn.read(&mut buf).await {
        Ok(0) | Err(_) => return,
        Ok(n) => n,
    };
    if buf[..n].starts_with(b"GET ") || buf[..n].starts_with(b"HEAD ") {
        let mut head = buf[..n].to_vec();
        while !head.windows(4).any(|w| w == b"\r\n\r\n") {
            match conn.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(m) => head.extend_from_slice(&buf[..m]),
            }
        }
        let response = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: text/plain\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let _ = conn.write_all(response.as_bytes()).await;
        let _ = conn.shutdown().await;
        return;
    }
    if conn.write_all(&buf[..n]).await.is_err() {
        return;
    }
    let (mut r, mut w) = conn.split();
    let _ = tokio::io::copy(&mut r, &mut w).await;
    let _ = w.shutdown().await;
}
