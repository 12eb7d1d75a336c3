//! Line-protocol index store server and its blocking client.
//!
//! One request per line, one response per request, UTF-8, `\n` terminated:
//!
//! ```text
//! GET <prefix>       -> <key>\n ... OK\n       (matching keys, then OK)
//! VAL <key>          -> OK <json>\n | ERR not-found\n
//! SET <key> <json>   -> OK\n | ERR <msg>\n
//! DEL <key>          -> OK\n | ERR not-found\n
//! anything else      -> ERR unknown-command\n
//! ```
//!
//! Keys contain no spaces; `<json>` is one index entry on a single line.
//! `GET` with an empty prefix lists every key.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream as StdTcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use edgepod_core::ports::{IndexEntry, IndexStore, MemoryStore, PortError};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader as AsyncBufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

/// Apply one request line to `store`, producing the full response text.
pub fn handle_line(store: &mut dyn IndexStore, line: &str) -> String {
    let line = line.trim_end_matches(['\r', '\n']);
    let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
    let result = match cmd {
        "GET" => store.keys(rest).map(|mut keys| {
            keys.sort();
            let mut out: String = keys.into_iter().map(|k| k + "\n").collect();
            out.push_str("OK\n");
            out
        }),
        "VAL" => store.get(rest).map(|entry| match entry {
            Some(e) => format!("OK {}\n", serde_json::to_string(&e).expect("entry serializes")),
            None => "ERR not-found\n".to_string(),
        }),
        "SET" => match rest.split_once(' ') {
            Some((key, json)) if !key.is_empty() => match serde_json::from_str::<IndexEntry>(json) {
                Ok(entry) => store.set(key, &entry).map(|_| "OK\n".to_string()),
                Err(e) => Ok(format!("ERR bad-json {e}\n")),
            },
            _ => Ok("ERR usage SET <key> <json>\n".to_string()),
        },
        "DEL" => store.del(rest).map(|removed| {
            if removed {
                "OK\n".to_string()
            } else {
                "ERR not-found\n".to_string()
            }
        }),
        _ => Ok("ERR unknown-command\n".to_string()),
    };
    result.unwrap_or_else(|e| format!("ERR {}\n", e.to_string().replace('\n', " ")))
}

/// TCP server over an in-memory store. All requests are serialized.
#[derive(Debug)]
pub struct StoreServer {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl StoreServer {
    pub async fn start(addr: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let store = Arc::new(Mutex::new(MemoryStore::new()));
        let task = tokio::spawn(async move {
            loop {
                let Ok((conn, _)) = listener.accept().await else { continue };
                tokio::spawn(serve(conn, Arc::clone(&store)));
            }
        });
        tracing::info!(%addr, "index store listening");
        Ok(Self { addr, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Resolves when the accept loop ends.
    pub async fn wait(&mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve(conn: TcpStream, store: Arc<Mutex<MemoryStore>>) {
    let (r, mut w) = conn.into_split();
    let mut lines = AsyncBufReader::new(r).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        let response = {
            let mut guard = store.lock().unwrap_or_else(|e| e.into_inner());
            handle_line(&mut *guard, &line)
        };
        if w.write_all(response.as_bytes()).await.is_err() {
            break;
        }
    }
}

/// Blocking [`IndexStore`] client. Reconnects lazily after a failure.
#[derive(Debug)]
pub struct RemoteStore {
    addr: SocketAddr,
    timeout: Duration,
    conn: Option<BufReader<StdTcpStream>>,
}

impl RemoteStore {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            timeout: Duration::from_secs(2),
            conn: None,
        }
    }

    fn unavailable(&mut self, e: impl std::fmt::Display) -> PortError {
        self.conn = None;
        PortError::StoreUnavailable(format!("{}: {e}", self.addr))
    }

    fn connection(&mut self) -> Result<&mut BufReader<StdTcpStream>, PortError> {
        if self.conn.is_none() {
            let stream = StdTcpStream::connect_timeout(&self.addr, self.timeout).map_err(|e| self.unavailable(e))?;
            stream
                .set_read_timeout(Some(self.timeout))
                .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
                .map_err(|e| self.unavailable(e))?;
            self.conn = Some(BufReader::new(stream));
        }
        Ok(self.conn.as_mut().expect("connected"))
    }

    /// Send one request and collect response lines up to the status line.
    fn request(&mut self, line: &str, multi: bool) -> Result<(Vec<String>, String), PortError> {
        let conn = self.connection()?;
        let sent = conn
            .get_mut()
            .write_all(format!("{line}\n").as_bytes())
            .and_then(|_| conn.get_mut().flush());
        if let Err(e) = sent {
            return Err(self.unavailable(e));
        }
        let mut body = Vec::new();
        loop {
            let mut buf = String::new();
            let conn = self.conn.as_mut().expect("connected");
            match conn.read_line(&mut buf) {
                Ok(0) => return Err(self.unavailable("connection closed")),
                Ok(_) => {}
                Err(e) => return Err(self.unavailable(e)),
            }
            let text = buf.trim_end_matches(['\r', '\n']).to_string();
            if text == "OK" || text.starts_with("OK ") || text.starts_with("ERR") || !multi {
                return Ok((body, text));
            }
            body.push(text);
        }
    }
}

impl IndexStore for RemoteStore {
    fn keys(&mut self, prefix: &str) -> Result<Vec<String>, PortError> {
        let (keys, status) = self.request(&format!("GET {prefix}"), true)?;
        match status.as_str() {
            "OK" => Ok(keys),
            other => Err(PortError::StoreUnavailable(other.to_string())),
        }
    }

    fn get(&mut self, key: &str) -> Result<Option<IndexEntry>, PortError> {
        let (_, status) = self.request(&format!("VAL {key}"), false)?;
        if status == "ERR not-found" {
            return Ok(None);
        }
        let json = status
            .strip_prefix("OK ")
            .ok_or_else(|| PortError::StoreUnavailable(status.clone()))?;
        serde_json::from_str(json)
            .map(Some)
            .map_err(|e| PortError::StoreUnavailable(format!("bad entry: {e}")))
    }

    fn set(&mut self, key: &str, entry: &IndexEntry) -> Result<(), PortError> {
        let json = serde_json::to_string(entry).expect("entry serializes");
        let (_, status) = self.request(&format!("SET {key} {json}"), false)?;
        if status == "OK" {
            Ok(())
        } else {
            Err(PortError::StoreUnavailable(status))
        }
    }

    fn del(&mut self, key: &str) -> Result<bool, PortError> {
        let (_, status) = self.request(&format!("DEL {key}"), false)?;
        match status.as_str() {
            "OK" => Ok(true),
            "ERR not-found" => Ok(false),
            _ => Err(PortError::StoreUnavailable(status)),
        }
    }
}
