//! Serves fixture repositories over `git://` with `git daemon`.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

/// A running `git daemon` exporting every repository under `base`, with
/// pushes enabled.
#[derive(Debug)]
pub struct GitDaemon {
    base: PathBuf,
    port: u16,
    child: Option<Child>,
}

impl GitDaemon {
    pub fn start(base: &Path) -> std::io::Result<Self> {
        let port = TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
        let mut d = Self {
            base: base.to_owned(),
            port,
            child: None,
        };
        d.restart()?;
        Ok(d)
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.port))
    }

    /// `git://` URL of `<base>/<name>.git`.
    pub fn url(&self, name: &str) -> String {
        format!("git://127.0.0.1:{}/{name}.git", self.port)
    }

    pub fn is_running(&self) -> bool {
        self.child.is_some()
    }

    /// Stops serving; clones and fetches fail until `restart`.
    pub fn stop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }

    /// Starts (again) on the same port.
    pub fn restart(&mut self) -> std::io::Result<()> {
        self.stop();
        let child = Command::new(daemon_binary()?)
            .arg("--reuseaddr")
            .arg("--export-all")
            .arg("--enable=receive-pack")
            .arg("--informative-errors")
            .arg("--max-connections=128")
            .arg(format!("--base-path={}", self.base.display()))
            .arg("--listen=127.0.0.1")
            .arg(format!("--port={}", self.port))
            .arg(&self.base)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()?;
        self.child = Some(child);
        let until = Instant::now() + Duration::from_secs(10);
        while Instant::now() < until {
            if TcpStream::connect(self.addr()).is_ok() {
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        self.stop();
        Err(std::io::Error::new(
            std::io::ErrorKind::TimedOut,
            "git daemon did not start listening",
        ))
    }
}

/// `git daemon` is not a builtin; `git` would run it as a child that
/// outlives a kill of the wrapper, so the binary is started directly.
fn daemon_binary() -> std::io::Result<PathBuf> {
    let out = Command::new("git").arg("--exec-path").output()?;
    let dir = String::from_utf8_lossy(&out.stdout).trim().to_owned();
    let bin = Path::new(&dir).join("git-daemon");
    if bin.is_file() {
        Ok(bin)
    } else {
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", bin.display()),
        ))
    }
}

impl Drop for GitDaemon {
    fn drop(&mut self) {
        self.stop();
    }
}
