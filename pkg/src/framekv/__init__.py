"""framekv: KV-cache chunks coded as lossless video-style frame streams.

Library layout:
  kvmodel    - tensor model, int8 quantization, synthetic KV, paged memory
  layout     - token slicing, frame placement, tile search, SSIM/PSNR
  rangecoder - adaptive byte-wise range coder
  codec      - lossless intra/inter predictive frame codec
  container  - multi-resolution chunk container file format
  fetchsim   - bandwidth-adaptive fetch pipeline simulator
  scheduler  - fetching-aware request scheduler simulator
  netstore   - chunk storage server and client over TCP
  reports    - CSV/JSON/PNG report emission
  cli        - command-line entry points
"""

__version__ = "0.1.0"
