use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on one session of a subject, test on its other session(s).
    CrossSession,
    /// Leave one subject out.
    CrossSubject,
    /// Leave one subject out, then adapt on one of its sessions.
    #[serde(rename = "cross-subject-ft")]
    CrossSubjectFinetune,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross-session" => Some(Self::CrossSession),
            "cross-subject" => Some(Self::CrossSubject),
            "cross-subject-ft" => Some(Self::CrossSubjectFinetune),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossSession => "cross-session",
            Self::CrossSubject => "cross-subject",
            Self::CrossSubjectFinetune => "cross-subject-ft",
        }
    }

    /// Number of folds this protocol has on `dataset`.
    pub fn n_folds(self, dataset: &Dataset) -> usize {
        match self {
            Self::CrossSession => dataset.subjects().iter().map(|&s| dataset.sessions_of(s).len()).sum(),
            Self::CrossSubject | Self::CrossSubjectFinetune => dataset.subjects().len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub adapt: Dataset,
    pub test: Dataset,
    /// The subject the fold is about (tested subject).
    pub subject: u32,
}

/// Partition `dataset` for fold `fold` of `protocol`.
///
/// Cross-session folds enumerate `(subject, training session)` pairs in
/// sorted order; the test set is every other session of that subject.
/// Fine-tuning folds adapt on the held-out subject's lowest session id.
pub fn split_protocol(dataset: &Dataset, protocol: Protocol, fold: usize) -> Result<Split> {
    let n_folds = protocol.n_folds(dataset);
    if fold >= n_folds {
        return Err(DataError::FoldOutOfRange {
            fold,
            n_folds,
            protocol,
        });
    }
    let subjects = dataset.subjects();
    let split = match protocol {
        Protocol::CrossSession => {
            let mut remaining = fold;
            let mut found = None;
            for &s in &subjects {
                let sessions = dataset.sessions_of(s);
                if remaining < sessions.len() {
                    found = Some((s, sessions[remaining]));
                    break;
                }
                remaining -= sessions.len();
            }
            let (subject, session) = found.expect("fold < n_folds");
            Split {
                train: dataset.filter(|t| t.subject_id == subject && t.session_id == session),
                adapt: dataset.empty_like(),
                test: dataset.filter(|t| t.subject_id == subject && t.session_id != session),
                subject,
            }
        }
        Protocol::CrossSubject => {
            let subject = subjects[fold];
            Split {
                train: dataset.filter(|t| t.subject_id != subject),
                adapt: dataset.empty_like(),
                test: dataset.filter(|t| t.subject_id == subject),
                subject,
            }
        }
        Protocol::CrossSubjectFinetune => {
            let subject = subjects[fold];
            let adapt_session = dataset.sessions_of(subject)[0];
            Split {
                train: dataset.filter(|t| t.subject_id != subject),
                adapt: dataset.filter(|t| t.subject_id == subject && t.session_id == adapt_session),
                test: dataset.filter(|t| t.subject_id == subject && t.session_id != adapt_session),
                subject,
            }
        }
    };
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        if part.is_empty() {
            return Err(DataError::EmptyPartition(format!(
                "{} fold {fold}: {name} partition is empty",
                protocol.name()
            )));
        }
    }
    Ok(split)
}
