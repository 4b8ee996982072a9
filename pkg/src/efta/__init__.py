"""Fault-tolerant blocked attention with strided checksums."""
from .core_tensor import AttnConfig, ConfigError, Counters, Matrix, Storage, gemm_mixed, random_qkv
from .attention_oracles import flash_attention, standard_attention
from .fault_injector import FaultPlan, FaultSpec, Injector, Site, flip_bit, sample_random_plan
from .kernel import FTMode, FTReport, decoupled_ft_forward, efta_forward, overhead_report
from .snvr_softmax import Thresholds
from .strided_abft import Status

__version__ = "0.1.0"
