#![allow(dead_code)]

use std::io::Read;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use tessera_core::{Image, RgbColor};

pub fn tessera() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tessera"))
}

pub fn run(args: &[&str]) -> Output {
    tessera().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Five well separated five-color families.
pub const FAMILIES: [[RgbColor; 5]; 5] = [
    [
        RgbColor { r: 200, g: 30, b: 30 },
        RgbColor { r: 250, g: 200, b: 40 },
        RgbColor { r: 40, g: 20, b: 20 },
        RgbColor { r: 240, g: 240, b: 230 },
        RgbColor { r: 150, g: 80, b: 20 },
    ],
    [
        RgbColor { r: 20, g: 60, b: 160 },
        RgbColor { r: 120, g: 200, b: 240 },
        RgbColor { r: 10, g: 20, b: 50 },
        RgbColor { r: 200, g: 220, b: 250 },
        RgbColor { r: 60, g: 120, b: 120 },
    ],
    [
        RgbColor { r: 30, g: 130, b: 50 },
        RgbColor { r: 170, g: 220, b: 90 },
        RgbColor { r: 20, g: 50, b: 20 },
        RgbColor { r: 230, g: 240, b: 200 },
        RgbColor { r: 110, g: 90, b: 40 },
    ],
    [
        RgbColor { r: 130, g: 40, b: 150 },
        RgbColor { r: 240, g: 130, b: 200 },
        RgbColor { r: 50, g: 10, b: 60 },
        RgbColor { r: 250, g: 220, b: 240 },
        RgbColor { r: 90, g: 90, b: 180 },
    ],
    [
        RgbColor { r: 100, g: 100, b: 100 },
        RgbColor { r: 200, g: 200, b: 200 },
        RgbColor { r: 30, g: 30, b: 30 },
        RgbColor { r: 250, g: 120, b: 0 },
        RgbColor { r: 0, g: 170, b: 170 },
    ],
];

/// 5x5 rank layouts with 13/6/3/2/1 cells per rank, built from one base
/// layout by row rotation and mirroring.
pub fn layout_templates() -> Vec<[usize; 25]> {
    const BASE: [usize; 25] = [
        0, 0, 0, 0, 0, //
        0, 0, 0, 0, 0, //
        0, 0, 0, 1, 1, //
        1, 1, 1, 1, 2, //
        2, 2, 3, 3, 4,
    ];
    let mut out = Vec::new();
    for shift in 0..5 {
        let mut t = [0; 25];
        for i in 0..25 {
            t[i] = BASE[(i + 5 * shift) % 25];
        }
        out.push(t);
    }
    for shift in 0..5 {
        let mut t = [0; 25];
        for r in 0..5 {
            for c in 0..5 {
                t[r * 5 + c] = out[shift][r * 5 + (4 - c)];
            }
        }
        out.push(t);
    }
    out
}

/// A 100x100 design: family colors painted on a layout template, with a
/// small per-design color jitter.
pub fn design(family: usize, variant: usize) -> Image {
    let layouts = layout_templates();
    let layout = layouts[(family * 3 + variant) % layouts.len()];
    let j = (variant % 4) as u8;
    let colors: Vec<RgbColor> = FAMILIES[family]
        .iter()
        .map(|c| RgbColor::new(c.r.saturating_add(j), c.g, c.b.saturating_sub(j)))
        .collect();
    Image::from_fn(100, 100, |x, y| colors[layout[(y / 20) * 5 + x / 20]]).unwrap()
}

/// Writes 50 designs (10 per family) to `dir`.
pub fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for f in 0..5 {
        for v in 0..10 {
            design(f, v).write_png(dir.join(format!("design-{f}-{v:02}.png"))).unwrap();
        }
    }
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn start(data_dir: &Path) -> Server {
        let port = free_port();
        let child = tessera()
            .args(["serve", "--addr", &format!("127.0.0.1:{port}"), "--data-dir"])
            .arg(data_dir)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .expect("server starts");
        let base = format!("http://127.0.0.1:{port}");
        let client = reqwest::blocking::Client::new();
        let deadline = Instant::now() + Duration::from_secs(30);
        let mut server = Server { child, base };
        loop {
            if client.get(format!("{}/images/none/bookmarks", server.base)).send().is_ok() {
                return server;
            }
            if let Ok(Some(status)) = server.child.try_wait() {
                let mut err = String::new();
                if let Some(mut e) = server.child.stderr.take() {
                    let _ = e.read_to_string(&mut err);
                }
                panic!("server exited with {status}: {err}");
            }
            assert!(Instant::now() < deadline, "server did not come up");
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    let total: u64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| {
            (0..3).map(move |i| (i32::from(p.channels()[i]) - i32::from(q.channels()[i])).unsigned_abs() as u64)
        })
        .sum();
    total as f64 / (a.len() * 3) as f64
}
