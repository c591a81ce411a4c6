"""Full model: slice encoder -> Z-former -> bridger -> decoder, plus checkpoint snapshots."""
import json
import logging
from pathlib import Path
from typing import Iterable, Literal, Optional, Union

import numpy as np
import torch
from torch import nn

from app.backend.checkpoint import MissingCheckpointError, load_module, read_manifest, save_module
from app.backend.volume import VolumeStack
from app.config import RunConfig
from app.models.bridger import Bridger
from app.models.decoder import (
    InstructionPrompt,
    PromptEmbedding,
    ToyDecoder,
    apply_lora,
    build_prompt,
    generate,
    has_lora,
)
from app.models.tokenizer import Tokenizer
from app.models.vit import ViT, encode_volume
from app.models.zformer import ZFormer

logger = logging.getLogger(__name__)

COMPONENTS = ("encoder", "zformer", "bridger", "decoder")
TOKENIZER_FILE = "tokenizer.json"
CONFIG_FILE = "run_config.json"


class MSVLM(nn.Module):
    def __init__(self, config: RunConfig, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.encoder = ViT(config.vit)
        self.zformer = ZFormer(config.zformer)
        self.bridger = Bridger(config.resampler, config.zformer.dim, config.decoder.dim)
        self.decoder = ToyDecoder(config.decoder, len(tokenizer))

    @torch.no_grad()
    def encode(self, stack: Union[VolumeStack, np.ndarray, torch.Tensor]) -> torch.Tensor:
        """Z_vol from the frozen slice encoder."""
        return encode_volume(self.encoder, stack)

    def visual_prompt(self, z_vol: torch.Tensor) -> torch.Tensor:
        return self.bridger(self.zformer(z_vol))

    def prompt(self, visual: torch.Tensor, instruction: InstructionPrompt) -> PromptEmbedding:
        return build_prompt(self.decoder, self.tokenizer, instruction, visual)

    @torch.no_grad()
    def generate(
            self,
            stack: Union[VolumeStack, np.ndarray, torch.Tensor],
            instruction: InstructionPrompt,
            max_len: int = 64,
            strategy: Literal["greedy", "top_k"] = "greedy",
            seed: int = 0,
    ) -> str:
        self.eval()
        visual = self.visual_prompt(self.encode(stack))
        return generate(self.decoder, self.tokenizer, self.prompt(visual, instruction), max_len, strategy, seed=seed)

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise ValueError(f"unknown component {name!r}")
        return getattr(self, name)

    def save(self, directory: Path, meta: Optional[dict] = None, components: Iterable[str] = COMPONENTS) -> Path:
        """Snapshot the given components, the tokenizer and the run config."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in components:
            component_meta = dict(meta or {})
            if name == "decoder":
                component_meta["lora"] = has_lora(self.decoder)
            if name == "zformer":
                component_meta["pattern_seed"] = self.config.zformer.pattern_seed
            save_module(self.component(name), directory / name, component_meta)
        self.tokenizer.save(directory / TOKENIZER_FILE)
        (directory / CONFIG_FILE).write_text(self.config.model_dump_json(indent=2))
        return directory

    def load_components(self, directory: Path, components: Iterable[str] = COMPONENTS) -> list[str]:
        """Load whichever of the components the snapshot holds; returns the loaded names."""
        directory = Path(directory)
        loaded = []
        for name in components:
            if not (directory / name).exists():
                continue
            if name == "decoder" and read_manifest(directory / name)["meta"].get("lora") and not has_lora(self.decoder):
                apply_lora(self.decoder, self.config.lora)
            load_module(self.component(name), directory / name)
            loaded.append(name)
        return loaded


def load_tokenizer(directory: Path) -> Tokenizer:
    path = Path(directory) / TOKENIZER_FILE
    if not path.exists():
        raise MissingCheckpointError(f"no tokenizer vocabulary at {path}")
    return Tokenizer.load(path)


def load_msvlm(directory: Path, config: Optional[RunConfig] = None) -> MSVLM:
    """Rebuild a model from a snapshot directory; the snapshot's own config wins unless one is given."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingCheckpointError(f"checkpoint directory {directory} does not exist")
    if config is None:
        config_path = directory / CONFIG_FILE
        if not config_path.exists():
            raise MissingCheckpointError(f"no run config at {config_path}")
        config = RunConfig.model_validate(json.loads(config_path.read_text()))
    model = MSVLM(config, load_tokenizer(directory))
    loaded = model.load_components(directory)
    if not loaded:
        raise MissingCheckpointError(f"{directory} holds no model components")
    logger.info("loaded %s from %s", ", ".join(loaded), directory)
    model.eval()
    return model
