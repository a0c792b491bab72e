pub mod attention;
pub mod branches;
pub mod head;
pub mod network;
pub mod session;
pub mod tokenizer;

pub use network::Dsainet;
pub use session::{apply_bn_updates, AttentionMap, MapFamily, Session, Trace};
