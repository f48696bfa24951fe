//! Annotated hex dump of a wire frame.

use dsms_core::codec::{compress, RealMessage};
use dsms_core::scheduler::BudgetVector;
use dsms_core::wire::{decode_frame, encode_frame, HEADER_LEN, PER_AGENT_HEADER_LEN};

/// A small deterministic frame: two agents, p = 8, budgets 6 and 2.
pub fn demo_frame() -> Vec<u8> {
    let m0 = RealMessage::new(vec![1.0, 0.5, -0.25, 0.0, 0.25, -0.5, 1.0, 0.0]).unwrap();
    let m1 = RealMessage::new(vec![0.125; 8]).unwrap();
    let msgs = vec![compress(&m0, 6).unwrap(), compress(&m1, 2).unwrap()];
    let budgets = BudgetVector::new(msgs.iter().map(|m| m.budget()).collect());
    encode_frame(&budgets, &msgs).unwrap()
}

fn hex_rows(bytes: &[u8]) {
    for (row, chunk) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        println!("{:06x}  {}", row * 16, hex.join(" "));
    }
}

pub fn dump(bytes: &[u8]) {
    println!("{} octets", bytes.len());
    hex_rows(bytes);
    println!();
    match decode_frame(bytes) {
        Ok((budgets, msgs)) => {
            let n = msgs.len();
            let p = msgs.first().map_or(0, |m| m.original_len());
            println!(
                "version {} | {} agents | p = {}",
                bytes.first().copied().unwrap_or_default(),
                n,
                p
            );
            let mut offset = HEADER_LEN + PER_AGENT_HEADER_LEN * n;
            for (i, msg) in msgs.iter().enumerate() {
                println!(
                    "agent {i}: k = {} coefficients, budget {} units, payload at 0x{offset:04x}",
                    msg.coefficients().len(),
                    budgets.get(i),
                );
                for (k, c) in msg.coefficients().iter().enumerate() {
                    println!("    [{k}] {:+.6} {:+.6}i", c.re, c.im);
                }
                offset += 8 * msg.coefficients().len();
            }
        }
        Err(e) => println!("malformed frame: {e}"),
    }
}
