#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use mixlab::clock::VirtualClock;
use mixlab::engine::{Engine, EngineConfig};
use mixlab::generator::Backend;
use mixlab::service::{GeneratorChoice, Server, ServiceConfig};
use mixlab::telemetry::TelemetryStore;

pub const T0: u64 = 1_700_000_000_000;

pub fn small() -> EngineConfig {
    EngineConfig {
        latent_dim: 16,
        width: 16,
        height: 16,
        generator_seed: 7,
    }
}

pub fn engine(dir: &Path) -> Engine {
    Engine::new(
        Arc::new(TelemetryStore::open(dir).unwrap()),
        small(),
        Backend::Procedural,
    )
}

/// In-process server on an ephemeral port, driven by a virtual clock.
pub struct TestServer {
    pub addr: SocketAddr,
    pub clock: Arc<VirtualClock>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    pub fn start(dir: &Path, generator: GeneratorChoice) -> Self {
        let clock = Arc::new(VirtualClock::new(T0));
        let config = ServiceConfig {
            port: 0,
            engine: small(),
            generator,
            master_seed: 3,
            sweep_interval: None,
            ..ServiceConfig::new(dir)
        };
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let c = Arc::clone(&clock);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let server = Server::bind_with_clock(&config, c).await.unwrap();
                addr_tx.send(server.local_addr().unwrap()).unwrap();
                server
                    .run(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).unwrap();
        Self {
            addr,
            clock,
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}/api{path}", self.addr)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Blocking HTTP client that returns every status as data.
pub struct Client {
    agent: ureq::Agent,
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn code(&self) -> String {
        self.json()["code"].as_str().unwrap_or_default().to_owned()
    }
}

impl Default for Client {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .new_agent();
        Self { agent }
    }
}

impl Client {
    fn finish(r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let r = r.unwrap();
        let status = r.status().as_u16();
        let content_type = r
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_owned();
        let body = r.into_body().read_to_vec().unwrap();
        Reply {
            status,
            content_type,
            body,
        }
    }

    pub fn get(&self, url: &str) -> Reply {
        Self::finish(self.agent.get(url).call())
    }

    pub fn post(&self, url: &str, body: &str) -> Reply {
        Self::finish(
            self.agent
                .post(url)
                .header("content-type", "application/json")
                .send(body),
        )
    }
}
