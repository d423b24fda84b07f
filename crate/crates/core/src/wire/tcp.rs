//! Thread-per-connection TCP transport.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::{read_frame, write_frame, Client, Request, Response, Service};
use crate::error::{Error, Result};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const IO_TIMEOUT: Duration = Duration::from_secs(60);

pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    /// Binds `addr` (port 0 picks a free port) and serves `svc` until dropped.
    pub fn bind(addr: &str, svc: Arc<dyn Service>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (stop2, conns2) = (stop.clone(), conns.clone());
        let accept = std::thread::Builder::new()
            .name(format!("accept-{local}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop2.load(Ordering::Acquire) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(c) = stream.try_clone() {
                        conns2.lock().push(c);
                    }
                    let svc = svc.clone();
                    let _ = std::thread::Builder::new()
                        .name("conn".into())
                        .spawn(move || serve_conn(stream, &*svc));
                }
            })?;
        Ok(TcpServer {
            addr: local,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("tcp:{}", self.addr)
    }

    /// Stops accepting and closes open connections.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_conn(stream: TcpStream, svc: &dyn Service) {
    let _ = stream.set_nodelay(true);
    let Ok(w) = stream.try_clone() else { return };
    let mut r = BufReader::new(stream);
    let mut w = BufWriter::new(w);
    loop {
        let req: Request = match read_frame(&mut r) {
            Ok(Some(req)) => req,
            Ok(None) => return,
            Err(Error::Wire(msg)) => {
                // Undecodable request: answer and keep the connection.
                let resp = Response::Error {
                    kind: "wire".into(),
                    message: msg,
                };
                if write_frame(&mut w, &resp).is_err() {
                    return;
                }
                continue;
            }
            Err(_) => return,
        };
        if write_frame(&mut w, &svc.handle(req)).is_err() {
            return;
        }
    }
}

type Conn = (BufReader<TcpStream>, BufWriter<TcpStream>);

/// Client holding one connection; reconnects after any transport error.
pub struct TcpClient {
    addr: String,
    conn: Mutex<Option<Conn>>,
}

impl TcpClient {
    pub fn new(addr: &str) -> Self {
        TcpClient {
            addr: addr.to_string(),
            conn: Mutex::new(None),
        }
    }

    fn connect(&self) -> Result<Conn> {
        let mut last = Error::Wire(format!("cannot resolve {}", self.addr));
        for a in self.addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(IO_TIMEOUT))?;
                    s.set_write_timeout(Some(IO_TIMEOUT))?;
                    let w = s.try_clone()?;
                    return Ok((BufReader::new(s), BufWriter::new(w)));
                }
                Err(e) => last = e.into(),
            }
        }
        Err(last)
    }
}

impl Client for TcpClient {
    fn call(&self, req: Request) -> Result<Response> {
        let mut guard = self.conn.lock();
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let (r, w) = guard.as_mut().expect("connected above");
        let out = write_frame(w, &req).and_then(|_| {
            read_frame::<_, Response>(r)?.ok_or_else(|| Error::Wire(format!("{} closed the connection", self.addr)))
        });
        if out.is_err() {
            *guard = None;
        }
        out
    }
}
