from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """应用程序配置（环境变量前缀 RWC_，也可写在 .env 中）"""

    # 输出配置
    output_dir: str = Field("./results", description="CSV/JSON 结果输出目录")
    csv_digits: int = Field(17, ge=1, le=17, description="CSV 中浮点数的有效数字位数")

    # 随机数配置：随机类命令必须显式给出种子
    master_seed: Optional[int] = Field(None, ge=0, description="主随机种子 (u64)")

    # 耦合模拟配置
    horizon: Optional[int] = Field(None, ge=1, description="单次耦合的最大步数，默认 200·L₀²")
    n_trials: int = Field(10000, ge=1, description="默认蒙特卡洛试验次数")
    workers: int = Field(1, ge=1, description="并行进程数")

    # 精确计算配置
    tv_horizon: int = Field(400, ge=0, description="全变差曲线的默认时间范围")

    # 统计检验配置
    dkw_level: float = Field(0.99, gt=0.0, lt=1.0, description="DKW 置信带水平")
    survivor_floor: int = Field(50, ge=1, description="拟合窗口内最少存活试验数")

    # verify 命令配置
    verify_trials: int = Field(100000, ge=1, description="验收时每台状态机的试验次数")
    dominance_samples: int = Field(100000, ge=1, description="退出时间占优耦合的抽样次数")
    marginal_trials: int = Field(20000, ge=1, description="边际分布审计的每条轨迹试验次数")

    model_config = SettingsConfigDict(
        env_prefix="RWC_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


def get_settings() -> Settings:
    """获取配置实例"""
    return Settings()
