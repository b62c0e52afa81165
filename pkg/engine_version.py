ENGINE_VERSION = "0.4.0"
ENGINE_NICKNAME = "Version 0.4.0 - Coupled Beds"
