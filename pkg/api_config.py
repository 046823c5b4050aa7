"""
Settings for the tokenization HTTP service, read from QUADTOK_* environment
variables (or a .env file).
"""
import os

from dotenv import load_dotenv

load_dotenv()

# Server Settings
API_HOST = os.getenv("QUADTOK_API_HOST", "127.0.0.1")
API_PORT = int(os.getenv("QUADTOK_API_PORT", 8003))

# CORS Settings
ENABLE_CORS = os.getenv("QUADTOK_ENABLE_CORS", "true").lower() == "true"
CORS_ORIGINS = os.getenv("QUADTOK_CORS_ORIGINS", "*").split(",")
CORS_CREDENTIALS = os.getenv("QUADTOK_CORS_CREDENTIALS", "true").lower() == "true"
CORS_METHODS = os.getenv("QUADTOK_CORS_METHODS", "*").split(",")
CORS_HEADERS = os.getenv("QUADTOK_CORS_HEADERS", "*").split(",")

# Request limits; PPM bodies of a 4096² image are ~48 MiB
MAX_BODY_BYTES = int(os.getenv("QUADTOK_MAX_BODY_BYTES", 64 * 1024 * 1024))
MAX_PATCHES = int(os.getenv("QUADTOK_MAX_PATCHES", 65536))

# API Settings
API_TITLE = "Quadtree Tokenizer API"
API_DESCRIPTION = "REST API for saliency-based mixed-resolution image tokenization"
API_VERSION = "0.1.0"
