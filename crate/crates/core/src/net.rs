//! TCP transport for the provider protocol.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::formats::PredictionVector;
use crate::id::Id;
use crate::serving::TaskSession;
use crate::wire::{decode, hello_line, submit_line, Ack, Connection, Message};

/// Longest accepted line, newline included.
pub const MAX_LINE: u64 = 16 << 20;

fn read_line<R: BufRead>(r: &mut R) -> io::Result<Option<String>> {
    let mut buf = String::new();
    let n = r.by_ref().take(MAX_LINE).read_line(&mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if !buf.ends_with('\n') && n as u64 == MAX_LINE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
    }
    Ok(Some(buf.trim_end_matches(['\n', '\r']).to_string()))
}

fn read_raw_line<R: BufRead>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    let n = r.by_ref().take(MAX_LINE).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') && n as u64 == MAX_LINE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
    }
    while matches!(buf.last(), Some(b'\n' | b'\r')) {
        buf.pop();
    }
    Ok(Some(buf))
}

/// Serves one provider connection until it closes.
pub fn serve_connection(stream: TcpStream, session: Arc<Mutex<TaskSession>>) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut conn = Connection::new();
    while let Some(line) = read_raw_line(&mut reader)? {
        let reply = {
            let mut s = session.lock().expect("session lock");
            conn.handle_bytes(&mut s, &line)
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections until every expected provider submitted or the
/// logical deadline passed. One tick elapses per `tick` of wall time.
pub fn run_collection(listener: &TcpListener, session: Arc<Mutex<TaskSession>>, tick: Duration) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut last_tick = Instant::now();
    loop {
        {
            let mut s = session.lock().expect("session lock");
            if s.all_submitted() || s.deadline_passed() {
                break;
            }
            while last_tick.elapsed() >= tick {
                s.advance(1);
                last_tick += tick;
            }
        }
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let s = Arc::clone(&session);
                thread::spawn(move || {
                    let _ = serve_connection(stream, s);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Provider side: HELLO, answer the challenge with a signed SUBMIT, return
/// the aggregator's ACK.
pub fn submit_over_tcp<A: ToSocketAddrs>(
    addr: A,
    task_id: &Id,
    provider_id: &Id,
    key: &[u8],
    predictions: &[PredictionVector],
) -> io::Result<Ack> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    writeln!(writer, "{}", hello_line(task_id, provider_id))?;
    let reply = read_line(&mut reader)?.ok_or_else(|| bad("connection closed".into()))?;
    let nonce = match decode(&reply).map_err(|e| bad(e.to_string()))? {
        Message::Challenge(c) => c.nonce,
        Message::Ack(a) => return Ok(a),
        other => return Err(bad(format!("unexpected reply {other:?}"))),
    };
    writeln!(writer, "{}", submit_line(task_id, provider_id, &nonce, predictions, key))?;
    let reply = read_line(&mut reader)?.ok_or_else(|| bad("connection closed".into()))?;
    match decode(&reply).map_err(|e| bad(e.to_string()))? {
        Message::Ack(a) => Ok(a),
        other => Err(bad(format!("unexpected reply {other:?}"))),
    }
}
