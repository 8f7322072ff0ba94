# backends/llava_hf.py
"""
Hugging Face の LLaVA-1.5 系モデル用アダプタ（任意機能）。

torch / transformers / Pillow が入っていない環境では HF_AVAILABLE = False となり、
インスタンス化した時点で BackendError を送出する。
必要なパッケージは requirements-hf.txt を参照。

統計量（エントロピー・対数確率・注意・隠れ状態）は、生成後の応答を
teacher forcing で1回流し直して取る。generate と rescore(mask=none) は
同じ計算経路を通るので同じ値になる。
"""
from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backends.base import (
    Backend,
    BackendError,
    ConfigError,
    DataError,
    Decoding,
    DegenerateSampleError,
    GenerationTrace,
    MaskError,
    MaskKind,
    MaskSpec,
    VisualLayout,
    resolve_layers,
)
from utils.logs import get_logger

try:
    import torch
    from PIL import Image
    from transformers import AutoProcessor, LlavaForConditionalGeneration
    HF_AVAILABLE = True
except ImportError:
    HF_AVAILABLE = False

log = get_logger("llava_hf")

IMAGE_TEMPLATE = "USER: <image>\n{prompt} ASSISTANT:"
TEXT_TEMPLATE = "USER: {prompt} ASSISTANT:"

DEFAULT_MODEL_ID = "llava-hf/llava-1.5-7b-hf"


def _decoder_layers(model) -> List[Any]:
    """transformers のバージョンによってモジュール構成が違うので両方試す"""
    for path in ("model.language_model.layers", "language_model.model.layers", "language_model.layers"):
        obj = model
        try:
            for attr in path.split("."):
                obj = getattr(obj, attr)
        except AttributeError:
            continue
        return list(obj)
    raise BackendError("could not locate decoder layers on the loaded model")


class LlavaHFBackend(Backend):
    supports_removal = True

    def __init__(self, model_id: str = DEFAULT_MODEL_ID, device: Optional[str] = None,
                 dtype: str = "float16", grid: Tuple[int, int] = (24, 24),
                 max_reply_tokens: int = 16, model_cache_dir: Optional[str] = None):
        super().__init__()
        if not HF_AVAILABLE:
            raise BackendError("torch / transformers / Pillow are not installed "
                               "(pip install -r requirements-hf.txt)")
        self.model_id = model_id
        self.dtype = dtype
        self.grid = (int(grid[0]), int(grid[1]))
        self.max_reply_tokens = max_reply_tokens
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        try:
            torch_dtype = getattr(torch, dtype)
        except AttributeError as e:
            raise ConfigError(f"unknown torch dtype: {dtype}") from e
        log.info(f"loading {model_id} on {self.device} ({dtype})")
        try:
            self.model = LlavaForConditionalGeneration.from_pretrained(
                model_id,
                torch_dtype=torch_dtype,
                low_cpu_mem_usage=True,
                attn_implementation="eager",
                cache_dir=model_cache_dir,
            ).to(self.device)
            self.model.eval()
            self.processor = AutoProcessor.from_pretrained(model_id, cache_dir=model_cache_dir)
        except Exception as e:
            raise BackendError(f"failed to load {model_id}: {e}") from e

        cfg = self.model.config
        self.image_token_id = getattr(cfg, "image_token_index", None) or getattr(cfg, "image_token_id")
        self.n_layers = int(cfg.text_config.num_hidden_layers)
        self.eos_token_id = self.processor.tokenizer.eos_token_id
        self.backend_id = f"llava-hf:{model_id}"

    # --- 入力 ------------------------------------------------------------
    def _load_image(self, image_ref):
        path = image_ref.get("path") if isinstance(image_ref, dict) else image_ref
        if not isinstance(path, str):
            raise DataError(f"unsupported image_ref for {self.backend_id}: {image_ref!r}")
        try:
            return Image.open(path).convert("RGB")
        except Exception as e:
            raise DataError(f"cannot open image {path}: {e}") from e

    def _inputs(self, image_ref, prompt: str, with_image: bool = True) -> Dict[str, Any]:
        if with_image:
            enc = self.processor(images=self._load_image(image_ref),
                                 text=IMAGE_TEMPLATE.format(prompt=prompt), return_tensors="pt")
        else:
            enc = self.processor.tokenizer(TEXT_TEMPLATE.format(prompt=prompt), return_tensors="pt")
        out = {}
        for key, value in enc.items():
            value = value.to(self.device)
            if key == "pixel_values":
                value = value.to(self.model.dtype)
            out[key] = value
        return out

    def _visual_positions(self, input_ids) -> "torch.Tensor":
        pos = (input_ids[0] == self.image_token_id).nonzero().flatten()
        n = self.grid[0] * self.grid[1]
        if len(pos) != n:
            raise BackendError(f"expected {n} image tokens in the prompt, found {len(pos)} "
                               "(processor must expand <image> into patch tokens)")
        return pos

    # --- knockout ---------------------------------------------------------
    def _knockout_hook(self, key_positions: "torch.Tensor"):
        def hook(module, args, kwargs):
            hidden = kwargs.get("hidden_states", args[0] if args else None)
            am = kwargs.get("attention_mask")
            if am is None:
                q = hidden.shape[1]
                am = torch.full((q, q), torch.finfo(hidden.dtype).min, device=hidden.device, dtype=hidden.dtype)
                am = torch.triu(am, diagonal=1)[None, None]
            else:
                am = am.clone()
            if am.dtype == torch.bool:
                am[..., key_positions] = False
            else:
                am[..., key_positions] = torch.finfo(am.dtype).min
            kwargs["attention_mask"] = am
            return args, kwargs
        return hook

    # --- teacher forcing --------------------------------------------------
    def _teacher_forced(self, image_ref, prompt: str, tokens: Sequence[int], mask: MaskSpec,
                        attention_layers, hidden_layers, blank_mode: str, t0: float) -> GenerationTrace:
        remove = mask.kind == MaskKind.BLANK and blank_mode == "remove"
        inputs = self._inputs(image_ref, prompt, with_image=not remove)
        prompt_ids = inputs["input_ids"]
        p = prompt_ids.shape[1]
        m = len(tokens)
        resp = torch.as_tensor(list(tokens), dtype=prompt_ids.dtype, device=self.device)[None]
        ids = torch.cat([prompt_ids, resp], dim=1)
        feed = {"input_ids": ids, "attention_mask": torch.ones_like(ids)}
        if "pixel_values" in inputs:
            feed["pixel_values"] = inputs["pixel_values"]

        att_layers = () if remove else resolve_layers(attention_layers, self.n_layers)
        hid_layers = () if (remove or hidden_layers is None) else resolve_layers(hidden_layers, self.n_layers + 1)

        handles = []
        if not remove:
            visual_pos = self._visual_positions(prompt_ids)
            if mask.indices:
                masked = visual_pos[list(mask.indices)]
                hook = self._knockout_hook(masked)
                handles = [layer.self_attn.register_forward_pre_hook(hook, with_kwargs=True)
                           for layer in _decoder_layers(self.model)]
        try:
            with torch.no_grad():
                out = self.model(**feed, output_attentions=bool(att_layers),
                                 output_hidden_states=bool(hid_layers))
        except Exception as e:
            raise BackendError(f"forward pass failed: {e}") from e
        finally:
            for h in handles:
                h.remove()
        self.counters.forward_passes += 1

        # 位置 p-1+j のロジットが y_j を予測する
        logits = out.logits[0, p - 1:p + m - 1].float()
        logp = torch.log_softmax(logits, dim=-1)
        entropies = -(logp.exp() * logp).sum(-1)
        realized = logp.gather(-1, resp[0][:, None]).squeeze(-1)

        attention = nonvisual = hidden_gen = hidden_vis = None
        if att_layers:
            rows = torch.stack([out.attentions[l][0, :, p - 1:p + m - 1, :].float() for l in att_layers])
            vis = rows[..., visual_pos]
            attention = vis.cpu().numpy()
            nonvisual = (rows.sum(-1) - vis.sum(-1)).clamp_min(0).cpu().numpy()
        if hid_layers:
            hs = out.hidden_states
            hidden_gen = torch.stack([hs[b][0, p:p + m].float() for b in hid_layers]).cpu().numpy()
            hidden_vis = torch.stack([hs[b][0, visual_pos].float() for b in hid_layers]).cpu().numpy()

        return GenerationTrace(
            tokens=np.asarray(list(tokens), dtype=np.int64),
            entropies=entropies.cpu().numpy(),
            logprobs=realized.cpu().numpy(),
            condition=mask.condition,
            mask=mask,
            n_layers=self.n_layers,
            n_visual=self.grid[0] * self.grid[1],
            attention_layers=att_layers,
            attention=attention,
            nonvisual_mass=nonvisual,
            hidden_layers=hid_layers,
            hidden_generated=hidden_gen,
            hidden_visual=hidden_vis,
            wall_time=self._clock() - t0,
            backend_id=self.backend_id,
            blank_mode="remove" if remove else "knockout",
            text=self.decode(tokens),
        )

    def _strip_eos(self, new_tokens) -> List[int]:
        out = []
        for t in new_tokens.tolist():
            if t == self.eos_token_id:
                break
            out.append(int(t))
        return out

    # --- 契約 ------------------------------------------------------------
    def generate(self, image_ref, prompt, decoding: Decoding, max_tokens: int,
                 *, attention_layers=None, hidden_layers=None) -> GenerationTrace:
        if max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        with self._exclusive():
            t0 = self._clock()
            self.counters.generations += 1
            inputs = self._inputs(image_ref, prompt)
            kwargs: Dict[str, Any] = {"max_new_tokens": max_tokens, "do_sample": decoding.mode == "sample"}
            if decoding.mode == "sample":
                torch.manual_seed(decoding.seed)
                kwargs.update(temperature=decoding.temperature, top_k=0, top_p=1.0)
            try:
                with torch.no_grad():
                    seq = self.model.generate(**inputs, **kwargs)
            except Exception as e:
                raise BackendError(f"generation failed: {e}") from e
            p = inputs["input_ids"].shape[1]
            new_tokens = seq[0, p:]
            self.counters.forward_passes += int(len(new_tokens))
            tokens = self._strip_eos(new_tokens)
            if not tokens:
                log.warning(f"degenerate generation (M=0) for {image_ref!r}")
                return GenerationTrace(tokens=[], entropies=[], logprobs=[], condition="full",
                                       mask=MaskSpec.none(self.grid[0] * self.grid[1]),
                                       n_layers=self.n_layers, n_visual=self.grid[0] * self.grid[1],
                                       wall_time=self._clock() - t0, backend_id=self.backend_id)
            return self._teacher_forced(image_ref, prompt, tokens, MaskSpec.none(self.grid[0] * self.grid[1]),
                                        attention_layers, hidden_layers, "knockout", t0)

    def rescore(self, image_ref, prompt, response_tokens, mask: MaskSpec,
                *, attention_layers=None, hidden_layers=None, blank_mode="knockout") -> GenerationTrace:
        tokens = [int(t) for t in response_tokens]
        if not tokens:
            raise DegenerateSampleError("rescore needs a non-empty response")
        n = self.grid[0] * self.grid[1]
        if mask.n_tokens != n:
            raise MaskError(f"mask built for {mask.n_tokens} visual tokens, backend has {n}")
        if blank_mode not in ("knockout", "remove"):
            raise ConfigError(f"unknown blank_mode: {blank_mode}")
        with self._exclusive():
            t0 = self._clock()
            self.counters.rescores += 1
            return self._teacher_forced(image_ref, prompt, tokens, mask,
                                        attention_layers, hidden_layers, blank_mode, t0)

    def ask(self, image_ref, prompt: str) -> str:
        with self._exclusive():
            self.counters.queries += 1
            inputs = self._inputs(image_ref, prompt)
            try:
                with torch.no_grad():
                    seq = self.model.generate(**inputs, max_new_tokens=self.max_reply_tokens, do_sample=False)
            except Exception as e:
                raise BackendError(f"query failed: {e}") from e
            new_tokens = seq[0, inputs["input_ids"].shape[1]:]
            self.counters.forward_passes += int(len(new_tokens))
            return self.decode(self._strip_eos(new_tokens))

    def decode(self, tokens: Sequence[int]) -> str:
        return self.processor.tokenizer.decode(list(tokens), skip_special_tokens=True).strip()

    def layout(self, image_ref) -> VisualLayout:
        return VisualLayout(self.grid[0] * self.grid[1], self.grid)

    def describe(self) -> Dict[str, Any]:
        d = super().describe()
        d.update({"model_id": self.model_id, "grid": list(self.grid), "device": self.device})
        return d

    def fingerprint(self) -> Dict[str, Any]:
        return {"backend_id": self.backend_id, "model_id": self.model_id, "grid": list(self.grid),
                "dtype": self.dtype, "max_reply_tokens": self.max_reply_tokens}
