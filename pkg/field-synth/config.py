from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    log_dir: str = "logs"
    log_file: str = "field_synth.log"
    log_level: str = "INFO"
    output_dir: str = "outputs"
    # single-threaded torch keeps float32 reductions bit-reproducible
    torch_threads: int = 1
    predict_chunk_size: int = 65536

    model_config = SettingsConfigDict(env_file='.env', env_prefix='FIELD_SYNTH_', extra='ignore')

settings = Settings()
