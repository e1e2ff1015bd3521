use std::collections::VecDeque;
use std::io::{Read, Write};

use super::wire::{self, Message};
use crate::error::{Error, Result};

/// Moves whole messages between devices and the server.
pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    /// Next message, or `None` when nothing more will arrive (loopback: queue empty).
    fn recv(&mut self) -> Result<Option<Message>>;
}

/// In-process FIFO. Messages still pass through the encoder and decoder.
#[derive(Debug, Default)]
pub struct Loopback {
    queue: VecDeque<Vec<u8>>,
}

impl Loopback {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

impl Transport for Loopback {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.queue.push_back(wire::encode(msg));
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        self.queue.pop_front().map(|f| wire::decode(&f)).transpose()
    }
}

/// Frames over any byte stream, e.g. a `TcpStream`.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.stream.write_all(&wire::encode(msg))?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        match wire::read_frame(&mut self.stream)? {
            Some(f) => wire::decode(&f).map(Some),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    fn byte(self) -> u8 {
        match self {
            Direction::Sent => b'>',
            Direction::Received => b'<',
        }
    }
}

/// Wraps a transport and appends every frame to a log: one direction byte
/// (`>` sent, `<` received) followed by the frame exactly as on the wire.
pub struct Recorder<T, W: Write> {
    inner: T,
    log: W,
}

impl<T, W: Write> Recorder<T, W> {
    pub fn new(inner: T, log: W) -> Self {
        Self { inner, log }
    }

    pub fn into_parts(self) -> (T, W) {
        (self.inner, self.log)
    }

    fn record(&mut self, dir: Direction, msg: &Message) -> Result<()> {
        self.log.write_all(&[dir.byte()])?;
        self.log.write_all(&wire::encode(msg))?;
        Ok(())
    }
}

impl<T: Transport, W: Write> Transport for Recorder<T, W> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.record(Direction::Sent, msg)?;
        self.inner.send(msg)
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        let msg = self.inner.recv()?;
        if let Some(m) = &msg {
            self.record(Direction::Received, m)?;
        }
        Ok(msg)
    }
}

/// Parses a log written by [`Recorder`].
pub fn read_log(mut r: impl Read) -> Result<Vec<(Direction, Message)>> {
    let mut out = Vec::new();
    let mut dir = [0u8; 1];
    loop {
        if r.read(&mut dir)? == 0 {
            return Ok(out);
        }
        let d = match dir[0] {
            b'>' => Direction::Sent,
            b'<' => Direction::Received,
            other => return Err(Error::Wire(format!("bad log direction byte {other:#04x}"))),
        };
        let frame = wire::read_frame(&mut r)?.ok_or_else(|| Error::Wire("log ends after direction byte".into()))?;
        out.push((d, wire::decode(&frame)?));
    }
}
