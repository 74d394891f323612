"""deskvla: a desk-scale edge vision-language-action stack.

Teleoperated data capture against a built-in differential-drive simulator,
timestamp synchronization, LoRA fine-tuning of a compact visuomotor policy,
block-wise NF4 quantization with hybrid precision, and an asynchronous
action-chunking control runtime.
"""
__version__ = "0.1.0"
