use crate::channel::{BlockModel, PortIo};
use crate::packet::Packet;

/// Copies each packet from `in` to `out` with every payload byte plus one.
#[derive(Debug, Default, Clone)]
pub struct IncLoopback;

pub fn increment(p: &Packet) -> Packet {
    let mut out = *p;
    for b in out.data.iter_mut() {
        *b = b.wrapping_add(1);
    }
    out
}

impl BlockModel for IncLoopback {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        if io.ready(0) {
            if let Some(p) = io.take(0) {
                io.send(0, increment(&p));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arange_stimulus() {
        let data: Vec<u8> = (0..32).collect();
        let p = Packet::new(7, 1, &data).unwrap();
        let q = increment(&p);
        assert_eq!(q.destination, 7);
        assert_eq!(q.flags, 1);
        for (i, &b) in q.data.iter().enumerate() {
            assert_eq!(b, if i < 32 { i as u8 + 1 } else { 1 });
        }
    }

    #[test]
    fn wraps_at_255() {
        let p = Packet::new(0, 0, &[255]).unwrap();
        assert_eq!(increment(&p).data[0], 0);
    }

    #[test]
    fn idle_without_input() {
        let inputs = [None];
        let mut taken = [false];
        let ready = [true];
        let mut offers = [None];
        let mut io = PortIo::new(0, &inputs, &mut taken, &ready, &mut offers);
        IncLoopback.on_cycle(&mut io);
        assert_eq!(offers, [None]);
    }

    #[test]
    fn holds_input_while_output_stalled() {
        let inputs = [Some(Packet::default())];
        let mut taken = [false];
        let ready = [false];
        let mut offers = [None];
        let mut io = PortIo::new(0, &inputs, &mut taken, &ready, &mut offers);
        IncLoopback.on_cycle(&mut io);
        assert_eq!(taken, [false]);
    }
}
