//! Cryptographic building blocks: oblivious transfer and Paillier.

pub mod monty;
pub mod ot;
pub mod paillier;
pub mod prime;

pub use ot::{channel, DhOt, ObliviousTransferChannel, OtBackend, OtError, SimulatedOt};
pub use paillier::{Ciphertext, KeyProfile, PaillierError, PaillierKeypair, PaillierPublicKey, PaillierSecretKey};
