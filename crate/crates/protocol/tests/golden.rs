//! Golden transcript of a fixed session against the demo instrument, seed 7.
//! Run with `UPDATE_GOLDEN=1` to rewrite the expected file.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::Arc;

use magscan::instrument::{InstrumentTruth, VirtualInstrument};
use magscan_protocol::{serve, Backend, Endpoint};
use tokio::runtime::Runtime;

const SCRIPT: &[&str] = &[
    "IDN?",
    "SET RFDET -58",
    "SET MOD RF 0.65 440",
    "SET MOD B Z 0.07 39",
    "SET COIL X 0.5",
    "SET COIL Y 3.6667",
    "READ LIA 1",
    "READ LIA 2",
    "SCAN COIL Z -3 3 12 LIA 1",
    "SCAN RFDET -20 20 5 LIA 2",
    "SET COIL Q 1",
    "SET RFDET 1e6",
    "QUIT",
];

fn transcript() -> String {
    let rt = Runtime::new().unwrap();
    let truth = InstrumentTruth::demo();
    assert_eq!(truth.seed, 7);
    let backend = Arc::new(Backend::new(Box::new(VirtualInstrument::new(truth).unwrap())).unwrap());
    let h = rt.block_on(serve(&"127.0.0.1:0".parse().unwrap(), backend)).unwrap();
    let Endpoint::Tcp(addr) = h.endpoint().clone() else { unreachable!() };
    let mut wr = TcpStream::connect(addr).unwrap();
    let mut rd = BufReader::new(wr.try_clone().unwrap());
    let mut out = String::new();
    for cmd in SCRIPT {
        out.push_str(&format!("> {cmd}\n"));
        wr.write_all(format!("{cmd}\n").as_bytes()).unwrap();
        let mut head = String::new();
        rd.read_line(&mut head).unwrap();
        out.push_str(&head);
        if let Some(n) = head.trim_end().strip_prefix("TRACE ") {
            for _ in 0..n.parse::<usize>().unwrap() {
                let mut l = String::new();
                rd.read_line(&mut l).unwrap();
                out.push_str(&l);
            }
        }
    }
    rt.block_on(h.shutdown());
    out
}

#[test]
fn demo_seed7_transcript() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/demo_seed7.txt");
    let got = transcript();
    assert_eq!(got, transcript(), "two runs with the same seed differ");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &got).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).expect("golden file missing; run with UPDATE_GOLDEN=1");
    assert_eq!(got, want);
}
