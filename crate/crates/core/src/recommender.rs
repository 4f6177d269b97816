//! The assembled recommender: vocabulary, backbone, optional LoRA adapters,
//! and either the CF table with its projectors (embedding mode) or atomic
//! user/item tokens (text-only mode).

use ndarray::Array1;

use crate::checkpoint::{TensorFile, FLAG_BACKBONE, FLAG_LORA, FLAG_PROJECTORS};
use crate::error::{Error, Result};
use crate::nanolm::{
    self, init_backbone, BackboneParams, GradRequest, HybridSequence, LoraParams, ModelConfig,
    Position,
};
use crate::projectors::{ProjectorPair, ProjectorTrace};
use crate::prompts::{Element, RenderedPrompt, Vocabulary};
use crate::wals::CfModel;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingInputs {
    pub cf: CfModel,
    pub projectors: ProjectorPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub vocab: Vocabulary,
    pub backbone: BackboneParams,
    pub lora: Option<LoraParams>,
    /// `None` for the text-only baseline.
    pub embedding: Option<EmbeddingInputs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    User,
    Item,
}

/// Where a projected vector was injected and how it was produced.
#[derive(Debug, Clone)]
pub struct SlotTrace {
    pub position: usize,
    pub kind: SlotKind,
    pub index: usize,
    pub trace: ProjectorTrace,
}

/// Gradients of one example's loss with respect to the trainable groups.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub loss: f64,
    pub backbone: Option<BackboneParams>,
    pub lora: Option<LoraParams>,
    pub projectors: Option<ProjectorPair>,
}

/// Maps prompt elements to model inputs: text stays a token, user and item
/// slots become projected CF vectors.
pub fn resolve_slots(
    elements: &[Element],
    cf: &CfModel,
    projectors: &ProjectorPair,
) -> Result<(HybridSequence, Vec<SlotTrace>)> {
    let mut positions = Vec::with_capacity(elements.len());
    let mut traces = Vec::new();
    for (t, e) in elements.iter().enumerate() {
        let (kind, index, out, trace) = match *e {
            Element::Text(id) => {
                positions.push(Position::Token(id));
                continue;
            }
            Element::UserSlot(u) => {
                let (out, trace) = projectors.user.forward_traced(cf.user_view(u)?)?;
                (SlotKind::User, u, out, trace)
            }
            Element::ItemSlot(i) => {
                let (out, trace) = projectors.item.forward_traced(cf.item_view(i)?)?;
                (SlotKind::Item, i, out, trace)
            }
        };
        positions.push(Position::Injected(out));
        traces.push(SlotTrace {
            position: t,
            kind,
            index,
            trace,
        });
    }
    Ok((HybridSequence::new(positions), traces))
}

fn fresh_backbone(vocab: &Vocabulary, model: &ModelConfig) -> Result<BackboneParams> {
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    };
    init_backbone(&cfg)
}

impl Recommender {
    /// Fresh backbone (sized to `vocab`) with CF inputs and newly
    /// initialized projectors.
    pub fn with_embeddings(
        vocab: Vocabulary,
        model: &ModelConfig,
        cf: CfModel,
        d_hidden: usize,
        projector_seed: u64,
    ) -> Result<Self> {
        let backbone = fresh_backbone(&vocab, model)?;
        let projectors = ProjectorPair::init(cf.d_cf(), d_hidden, model.d_model, projector_seed);
        Ok(Recommender {
            vocab,
            backbone,
            lora: None,
            embedding: Some(EmbeddingInputs { cf, projectors }),
        })
    }

    /// Fresh backbone for the text-only baseline.
    pub fn text_only(vocab: Vocabulary, model: &ModelConfig) -> Result<Self> {
        let backbone = fresh_backbone(&vocab, model)?;
        Ok(Recommender {
            vocab,
            backbone,
            lora: None,
            embedding: None,
        })
    }

    pub fn is_text_only(&self) -> bool {
        self.embedding.is_none()
    }

    fn text_only_tokens(&self, elements: &[Element]) -> Result<HybridSequence> {
        let positions = elements
            .iter()
            .map(|e| {
                Ok(Position::Token(match *e {
                    Element::Text(t) => t,
                    Element::UserSlot(u) => self.vocab.user_token(u)?,
                    Element::ItemSlot(i) => self.vocab.item_token(i)?,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HybridSequence::new(positions))
    }

    /// Model input for a sequence of prompt elements, with slot traces in
    /// embedding mode.
    pub fn sequence(&self, elements: &[Element]) -> Result<(HybridSequence, Vec<SlotTrace>)> {
        match &self.embedding {
            Some(e) => resolve_slots(elements, &e.cf, &e.projectors),
            None => Ok((self.text_only_tokens(elements)?, Vec::new())),
        }
    }

    /// Next-token logits restricted to the item tokens, at the target item
    /// position of the prompt.
    pub fn item_scores(&self, prompt: &RenderedPrompt) -> Result<Array1<f64>> {
        let (seq, _) = self.sequence(&prompt.scoring_prefix())?;
        let logits = nanolm::next_token_logits(&self.backbone, self.lora.as_ref(), &seq)?;
        let base = self.vocab.item_base();
        Ok(logits
            .slice(ndarray::s![base..base + self.vocab.n_items()])
            .to_owned())
    }

    pub fn loss(&self, prompt: &RenderedPrompt) -> Result<f64> {
        let lm = prompt.lm_layout();
        let (seq, _) = self.sequence(&lm.inputs)?;
        nanolm::loss(
            &self.backbone,
            self.lora.as_ref(),
            &seq,
            &lm.labels,
            &lm.mask,
        )
    }

    /// Loss and gradients for one prompt. LoRA gradients are produced when
    /// adapters are attached, projector gradients in embedding mode, and
    /// backbone gradients only on request.
    pub fn example_gradients(
        &self,
        prompt: &RenderedPrompt,
        backbone: bool,
    ) -> Result<ExampleGradients> {
        let lm = prompt.lm_layout();
        let (seq, traces) = self.sequence(&lm.inputs)?;
        let want = GradRequest {
            backbone,
            lora: self.lora.is_some(),
        };
        let (loss, grads) = nanolm::backward(
            &self.backbone,
            self.lora.as_ref(),
            &seq,
            &lm.labels,
            &lm.mask,
            want,
        )?;
        let projectors = match &self.embedding {
            None => None,
            Some(e) => {
                let mut g = e.projectors.zeros_like();
                debug_assert_eq!(traces.len(), grads.injected.len());
                for (slot, (pos, upstream)) in traces.iter().zip(&grads.injected) {
                    debug_assert_eq!(slot.position, *pos);
                    match slot.kind {
                        SlotKind::User => e.projectors.user.backward(
                            e.cf.user_view(slot.index)?,
                            &slot.trace,
                            upstream.view(),
                            &mut g.user,
                        )?,
                        SlotKind::Item => e.projectors.item.backward(
                            e.cf.item_view(slot.index)?,
                            &slot.trace,
                            upstream.view(),
                            &mut g.item,
                        )?,
                    };
                }
                Some(g)
            }
        };
        Ok(ExampleGradients {
            loss,
            backbone: grads.backbone,
            lora: grads.lora,
            projectors,
        })
    }

    /// Backbone, LoRA and projector sections. The CF table lives in its own
    /// checkpoint.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut flags = FLAG_BACKBONE;
        if self.lora.is_some() {
            flags |= FLAG_LORA;
        }
        if self.embedding.is_some() {
            flags |= FLAG_PROJECTORS;
        }
        let mut f = TensorFile::new(flags);
        f.set_meta("vocab.size", self.vocab.len());
        f.set_meta("vocab.n_items", self.vocab.n_items());
        f.set_meta("vocab.n_user_tokens", self.vocab.n_user_tokens());
        self.backbone.write_sections(&mut f);
        if let Some(l) = &self.lora {
            l.write_sections(&mut f);
        }
        if let Some(e) = &self.embedding {
            e.projectors.write_sections(&mut f);
        }
        f
    }

    /// Rebuilds a recommender from a model checkpoint. `cf` is required
    /// exactly when the checkpoint carries projector sections.
    pub fn from_tensor_file(
        f: &TensorFile,
        vocab: Vocabulary,
        cf: Option<CfModel>,
    ) -> Result<Self> {
        if !f.has(FLAG_BACKBONE) {
            return Err(Error::invalid("checkpoint has no backbone"));
        }
        let size: usize = f.meta_parse("vocab.size")?;
        if size != vocab.len() {
            return Err(Error::invalid(format!(
                "checkpoint vocabulary has {size} tokens, current data gives {}",
                vocab.len()
            )));
        }
        let backbone = BackboneParams::read_sections(f)?;
        let lora = if f.has(FLAG_LORA) {
            Some(LoraParams::read_sections(f, &backbone.config)?)
        } else {
            None
        };
        let embedding = match (f.has(FLAG_PROJECTORS), cf) {
            (true, Some(cf)) => Some(EmbeddingInputs {
                cf,
                projectors: ProjectorPair::read_sections(f)?,
            }),
            (true, None) => return Err(Error::invalid("embedding checkpoint needs a CF table")),
            (false, _) => None,
        };
        Ok(Recommender {
            vocab,
            backbone,
            lora,
            embedding,
        })
    }
}
